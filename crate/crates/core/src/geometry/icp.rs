use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{kabsch, lit, rotation_angle, KdTree, Pose, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once an update moves less than this many radians and millimetres.
    pub tolerance: f64,
    /// Share of the worst matches dropped each iteration.
    pub trim_fraction: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            tolerance: 1e-4,
            trim_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult<T: Real> {
    pub pose: Pose<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the scene cloud is empty and `pose` is the initial pose.
    pub empty_scene: bool,
    /// Trimmed mean squared match distance before each update.
    pub residuals: Vec<T>,
}

/// Point-to-point ICP aligning `model` (object frame) to `scene` (camera
/// frame), starting from `init`.
pub fn icp_refine<T: Real>(
    model: &[Vector3<T>],
    scene: &[Vector3<T>],
    init: &Pose<T>,
    cfg: &IcpConfig,
) -> IcpResult<T> {
    let tree = KdTree::new(scene.to_vec());
    icp_with_tree(model, &tree, init, cfg)
}

pub(crate) fn icp_with_tree<T: Real>(
    model: &[Vector3<T>],
    tree: &KdTree<T>,
    init: &Pose<T>,
    cfg: &IcpConfig,
) -> IcpResult<T> {
    let mut result = IcpResult {
        pose: *init,
        iterations: 0,
        converged: false,
        empty_scene: tree.is_empty(),
        residuals: Vec::new(),
    };
    if tree.is_empty() || model.len() < 3 {
        return result;
    }
    let keep = ((model.len() as f64) * (1.0 - cfg.trim_fraction.clamp(0.0, 0.95))).ceil() as usize;
    let keep = keep.clamp(3, model.len());
    let tol = lit::<T>(cfg.tolerance);
    let mut pairs: Vec<(T, usize, usize)> = Vec::with_capacity(model.len());
    for _ in 0..cfg.max_iterations {
        let moved: Vec<Vector3<T>> = model.iter().map(|p| result.pose.transform(p)).collect();
        pairs.clear();
        for (i, p) in moved.iter().enumerate() {
            let (j, d2) = tree.nearest(p).expect("non-empty tree");
            pairs.push((d2, i, j));
        }
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let kept = &pairs[..keep];
        let mse = kept.iter().fold(T::zero(), |acc, p| acc + p.0) / lit(keep as f64);
        result.residuals.push(mse);
        let src: Vec<Vector3<T>> = kept.iter().map(|&(_, i, _)| moved[i]).collect();
        let dst: Vec<Vector3<T>> = kept.iter().map(|&(_, _, j)| tree.points()[j]).collect();
        let Ok(delta) = kabsch(&src, &dst) else { break };
        result.pose = delta.compose(&result.pose);
        result.pose.rotation = super::orthonormalize(&result.pose.rotation);
        result.iterations += 1;
        let change = rotation_angle(&delta.rotation).max(delta.translation.norm());
        if change < tol {
            result.converged = true;
            break;
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..400)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-35.0..35.0),
                    rng.random_range(-20.0..20.0),
                )
            })
            .collect()
    }

    #[test]
    fn exact_pose_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = cloud(&mut rng);
        let pose = Pose::from_axis_angle(Vector3::new(0.2, 0.1, -0.3), Vector3::new(10.0, -5.0, 800.0));
        let scene: Vec<_> = model.iter().map(|p| pose.transform(p)).collect();
        let r = icp_refine(&model, &scene, &pose, &IcpConfig::default());
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!(r.pose.rotation_error(&pose) < 1e-10);
        assert!(r.pose.translation_error(&pose) < 1e-8);
    }

    #[test]
    fn empty_scene_returns_init_flagged() {
        let model = cloud(&mut ChaCha8Rng::seed_from_u64(1));
        let init = Pose::identity();
        let r = icp_refine(&model, &[], &init, &IcpConfig::default());
        assert!(r.empty_scene);
        assert_eq!(r.pose, init);
    }

    #[test]
    fn residuals_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let model = cloud(&mut rng);
            let pose = Pose::from_axis_angle(Vector3::new(0.1, 0.4, -0.2), Vector3::new(0.0, 0.0, 700.0));
            let scene: Vec<_> = model.iter().map(|p| pose.transform(p)).collect();
            let init = Pose::from_axis_angle(Vector3::new(0.05, -0.04, 0.06), Vector3::new(8.0, -6.0, 5.0)).compose(&pose);
            let r = icp_refine(&model, &scene, &init, &IcpConfig::default());
            for w in r.residuals.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-18, "{:?}", r.residuals);
            }
        }
    }
}
