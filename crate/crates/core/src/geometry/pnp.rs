use nalgebra::{DMatrix, Matrix3, Matrix6, SMatrix, SVector, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kabsch, lit, orthonormalize, GeometryError, Intrinsics, Pose, Real, Result};

/// A pixel paired with the model point it observes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T: Real> {
    pub pixel: Vector2<T>,
    pub point: Vector3<T>,
}

impl<T: Real> Correspondence<T> {
    pub fn new(pixel: Vector2<T>, point: Vector3<T>) -> Self {
        Self { pixel, point }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub sample_size: usize,
    /// Reprojection error bound for inliers, in pixels.
    pub inlier_px: f64,
    /// Smallest consensus accepted, and smallest input.
    pub min_inliers: usize,
    pub refine: bool,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            sample_size: 4,
            inlier_px: 5.0,
            min_inliers: 6,
            refine: true,
            refine_iterations: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult<T: Real> {
    pub pose: Pose<T>,
    /// Indices into the input, ascending.
    pub inliers: Vec<usize>,
    /// Mean reprojection error over the inliers, in pixels.
    pub mean_error: T,
}

fn reprojection_error<T: Real>(pose: &Pose<T>, k: &Intrinsics<T>, c: &Correspondence<T>) -> Option<T> {
    k.project(&pose.transform(&c.point)).map(|px| (px - c.pixel).norm())
}

fn normalized<T: Real>(k: &Intrinsics<T>, px: &Vector2<T>) -> Vector2<T> {
    Vector2::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy)
}

/// Principal frame of a point set: centroid, axes (columns, right-handed,
/// by decreasing spread) and the variances along them.
fn principal_frame<T: Real>(points: &[Vector3<T>]) -> (Vector3<T>, Matrix3<T>, Vector3<T>) {
    let n = lit::<T>(points.len() as f64);
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    if axes.determinant() < T::zero() {
        axes.column_mut(2).neg_mut();
    }
    let var = Vector3::new(
        eig.eigenvalues[idx[0]].max(T::zero()),
        eig.eigenvalues[idx[1]].max(T::zero()),
        eig.eigenvalues[idx[2]].max(T::zero()),
    );
    (c, axes, var)
}

fn is_planar<T: Real>(var: &Vector3<T>) -> bool {
    var[2] <= var[0] * lit(1e-10)
}

fn mean_error<T: Real>(pose: &Pose<T>, k: &Intrinsics<T>, corrs: &[Correspondence<T>]) -> T {
    let mut sum = T::zero();
    for c in corrs {
        match reprojection_error(pose, k, c) {
            Some(e) => sum += e,
            None => return T::max_value().expect("bounded float"),
        }
    }
    sum / lit(corrs.len() as f64)
}

/// Pose from at least four correspondences by the EPnP method: four
/// virtual control points, null-space combination weights fitted to the
/// control-point distances, then Gauss-Newton on those weights.
///
/// Coplanar model points are handed to [`planar_pnp`].
pub fn epnp<T: Real>(corrs: &[Correspondence<T>], k: &Intrinsics<T>) -> Result<Pose<T>> {
    if corrs.len() < 4 {
        return Err(GeometryError::TooFewCorrespondences {
            got: corrs.len(),
            need: 4,
        });
    }
    let world: Vec<Vector3<T>> = corrs.iter().map(|c| c.point).collect();
    let (c0, axes, var) = principal_frame(&world);
    if var[0] <= T::zero() {
        return Err(GeometryError::Degenerate("all model points coincide"));
    }
    if is_planar(&var) {
        return planar_pnp(corrs, k);
    }
    let mut ctrl = [c0; 4];
    for j in 0..3 {
        ctrl[j + 1] = c0 + axes.column(j) * var[j].sqrt();
    }
    let basis = Matrix3::from_columns(&[ctrl[1] - c0, ctrl[2] - c0, ctrl[3] - c0]);
    let inv = basis
        .try_inverse()
        .ok_or(GeometryError::Degenerate("control points are coplanar"))?;
    let alphas: Vec<[T; 4]> = world
        .iter()
        .map(|p| {
            let a = inv * (p - c0);
            [T::one() - a.x - a.y - a.z, a.x, a.y, a.z]
        })
        .collect();

    let mut m = DMatrix::<T>::zeros(2 * corrs.len(), 12);
    for (i, (c, a)) in corrs.iter().zip(&alphas).enumerate() {
        for j in 0..4 {
            m[(2 * i, 3 * j)] = a[j] * k.fx;
            m[(2 * i, 3 * j + 2)] = a[j] * (k.cx - c.pixel.x);
            m[(2 * i + 1, 3 * j + 1)] = a[j] * k.fy;
            m[(2 * i + 1, 3 * j + 2)] = a[j] * (k.cy - c.pixel.y);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = mtm.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let v: [SVector<T, 12>; 4] = std::array::from_fn(|i| {
        SVector::<T, 12>::from_iterator(eig.eigenvectors.column(order[i]).iter().copied())
    });

    const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let seg = |vec: &SVector<T, 12>, j: usize| Vector3::new(vec[3 * j], vec[3 * j + 1], vec[3 * j + 2]);
    // L maps the ten products beta_a * beta_b (a <= b) to squared distances.
    let mut l = SMatrix::<T, 6, 10>::zeros();
    let mut rho = SVector::<T, 6>::zeros();
    for (r, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: [Vector3<T>; 4] = std::array::from_fn(|i| seg(&v[i], a) - seg(&v[i], b));
        let two = lit::<T>(2.0);
        let row = [
            dv[0].dot(&dv[0]),
            two * dv[0].dot(&dv[1]),
            dv[1].dot(&dv[1]),
            two * dv[0].dot(&dv[2]),
            two * dv[1].dot(&dv[2]),
            dv[2].dot(&dv[2]),
            two * dv[0].dot(&dv[3]),
            two * dv[1].dot(&dv[3]),
            two * dv[2].dot(&dv[3]),
            dv[3].dot(&dv[3]),
        ];
        for (cidx, val) in row.into_iter().enumerate() {
            l[(r, cidx)] = val;
        }
        rho[r] = (ctrl[a] - ctrl[b]).norm_squared();
    }

    let solve = |cols: &[usize]| -> Option<Vec<T>> {
        let sub = DMatrix::from_fn(6, cols.len(), |r, c| l[(r, cols[c])]);
        let rhs = DMatrix::from_fn(6, 1, |r, _| rho[r]);
        let x = sub.svd(true, true).solve(&rhs, lit(1e-12)).ok()?;
        Some(x.iter().copied().collect())
    };
    let mut candidates: Vec<[T; 4]> = Vec::new();
    if let Some(b) = solve(&[0, 1, 3, 6]) {
        let b1 = b[0].abs().sqrt();
        if b1 > T::zero() {
            let s = if b[0] < T::zero() { -T::one() } else { T::one() };
            candidates.push([b1, s * b[1] / b1, s * b[2] / b1, s * b[3] / b1]);
        }
    }
    if let Some(b) = solve(&[0, 1, 2]) {
        let b1 = b[0].abs().sqrt();
        let b2 = b[2].abs().sqrt() * if (b[1] < T::zero()) != (b[0] < T::zero()) { -T::one() } else { T::one() };
        candidates.push([b1, b2, T::zero(), T::zero()]);
    }
    if let Some(b) = solve(&[0, 1, 2, 3, 4]) {
        let b1 = b[0].abs().sqrt();
        if b1 > T::zero() {
            let b2 = b[2].abs().sqrt() * if (b[1] < T::zero()) != (b[0] < T::zero()) { -T::one() } else { T::one() };
            candidates.push([b1, b2, b[3] / b1, T::zero()]);
        }
    }

    let mut best: Option<(T, Pose<T>)> = None;
    for beta in candidates {
        let beta = gauss_newton(&l, &rho, beta);
        let mut x = SVector::<T, 12>::zeros();
        for i in 0..4 {
            x += v[i] * beta[i];
        }
        let ctrl_cam: [Vector3<T>; 4] = std::array::from_fn(|j| seg(&x, j));
        let mut cam: Vec<Vector3<T>> = alphas
            .iter()
            .map(|a| (0..4).fold(Vector3::zeros(), |acc, j| acc + ctrl_cam[j] * a[j]))
            .collect();
        if cam.iter().filter(|p| p.z < T::zero()).count() * 2 > cam.len() {
            cam.iter_mut().for_each(|p| *p = -*p);
        }
        let Ok(pose) = kabsch(&world, &cam) else { continue };
        let err = mean_error(&pose, k, corrs);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or(GeometryError::Degenerate("no EPnP candidate"))
}

fn gauss_newton<T: Real>(l: &SMatrix<T, 6, 10>, rho: &SVector<T, 6>, mut b: [T; 4]) -> [T; 4] {
    let two = lit::<T>(2.0);
    for _ in 0..10 {
        let prods = [
            b[0] * b[0],
            b[0] * b[1],
            b[1] * b[1],
            b[0] * b[2],
            b[1] * b[2],
            b[2] * b[2],
            b[0] * b[3],
            b[1] * b[3],
            b[2] * b[3],
            b[3] * b[3],
        ];
        let mut jac = SMatrix::<T, 6, 4>::zeros();
        let mut res = SVector::<T, 6>::zeros();
        for r in 0..6 {
            let row = |c: usize| l[(r, c)];
            res[r] = (0..10).fold(T::zero(), |acc, c| acc + row(c) * prods[c]) - rho[r];
            jac[(r, 0)] = two * b[0] * row(0) + b[1] * row(1) + b[2] * row(3) + b[3] * row(6);
            jac[(r, 1)] = b[0] * row(1) + two * b[1] * row(2) + b[2] * row(4) + b[3] * row(7);
            jac[(r, 2)] = b[0] * row(3) + b[1] * row(4) + two * b[2] * row(5) + b[3] * row(8);
            jac[(r, 3)] = b[0] * row(6) + b[1] * row(7) + b[2] * row(8) + two * b[3] * row(9);
        }
        let jtj = jac.transpose() * jac;
        let Some(step) = jtj.try_inverse().map(|inv| inv * (jac.transpose() * res)) else {
            break;
        };
        for i in 0..4 {
            b[i] -= step[i];
        }
        if step.norm() <= lit::<T>(1e-14) * (b.iter().fold(T::zero(), |a, x| a + *x * *x)).sqrt() {
            break;
        }
    }
    b
}

/// Pose from at least four correspondences of coplanar model points via a
/// plane-to-image homography.
pub fn planar_pnp<T: Real>(corrs: &[Correspondence<T>], k: &Intrinsics<T>) -> Result<Pose<T>> {
    if corrs.len() < 4 {
        return Err(GeometryError::TooFewCorrespondences {
            got: corrs.len(),
            need: 4,
        });
    }
    let world: Vec<Vector3<T>> = corrs.iter().map(|c| c.point).collect();
    let (c0, axes, var) = principal_frame(&world);
    if var[1] <= var[0] * lit(1e-12) {
        return Err(GeometryError::Degenerate("model points are collinear"));
    }
    let mut a = DMatrix::<T>::zeros(2 * corrs.len(), 9);
    for (i, c) in corrs.iter().enumerate() {
        let q = axes.transpose() * (c.point - c0);
        let m = normalized(k, &c.pixel);
        let (x, y) = (q.x, q.y);
        let o = T::one();
        let r0 = [x, y, o, T::zero(), T::zero(), T::zero(), -m.x * x, -m.x * y, -m.x];
        let r1 = [T::zero(), T::zero(), T::zero(), x, y, o, -m.y * x, -m.y * y, -m.y];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let min = (0..9)
        .min_by(|&x, &y| {
            eig.eigenvalues[x]
                .partial_cmp(&eig.eigenvalues[y])
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("nine eigenvalues");
    let h = eig.eigenvectors.column(min);
    let hm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let (h1, h2, h3) = (hm.column(0).into_owned(), hm.column(1).into_owned(), hm.column(2).into_owned());
    let norm = (h1.norm() + h2.norm()) / lit(2.0);
    if norm <= T::zero() {
        return Err(GeometryError::Degenerate("null homography"));
    }
    let mut s = T::one() / norm;
    if h3.z * s < T::zero() {
        s = -s;
    }
    let r1 = h1 * s;
    let r2 = h2 * s;
    let rp = orthonormalize(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let tp = h3 * s;
    let rotation = rp * axes.transpose();
    let pose = Pose::new(rotation, tp - rotation * c0);
    Ok(pose)
}

/// Levenberg-Marquardt on the summed squared reprojection error, with a
/// left-multiplied axis-angle rotation increment and an additive
/// translation increment.
pub fn refine_pose<T: Real>(
    init: &Pose<T>,
    corrs: &[Correspondence<T>],
    k: &Intrinsics<T>,
    iterations: usize,
) -> Pose<T> {
    let cost = |pose: &Pose<T>| -> Option<T> {
        let mut s = T::zero();
        for c in corrs {
            let x = pose.transform(&c.point);
            let px = k.project(&x)?;
            s += (px - c.pixel).norm_squared();
        }
        Some(s)
    };
    let mut pose = *init;
    let Some(mut current) = cost(&pose) else {
        return pose;
    };
    let mut mu = lit::<T>(1e-3);
    for _ in 0..iterations {
        let mut jtj = Matrix6::<T>::zeros();
        let mut jtr = Vector6::<T>::zeros();
        for c in corrs {
            let rp = pose.rotation * c.point;
            let x = rp + pose.translation;
            let iz = T::one() / x.z;
            let u = k.fx * x.x * iz + k.cx;
            let v = k.fy * x.y * iz + k.cy;
            let du = Vector3::new(k.fx * iz, T::zero(), -k.fx * x.x * iz * iz);
            let dv = Vector3::new(T::zero(), k.fy * iz, -k.fy * x.y * iz * iz);
            // d(rp)/d(omega) = -[rp]x for a left increment.
            let skew = -rp.cross_matrix();
            let ju_r = skew.transpose() * du;
            let jv_r = skew.transpose() * dv;
            let ju = Vector6::new(ju_r.x, ju_r.y, ju_r.z, du.x, du.y, du.z);
            let jv = Vector6::new(jv_r.x, jv_r.y, jv_r.z, dv.x, dv.y, dv.z);
            let (ru, rv) = (u - c.pixel.x, v - c.pixel.y);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += mu * (jtj[(i, i)] + lit(1e-12));
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                mu *= lit(10.0);
                continue;
            };
            let dr = nalgebra::Rotation3::from_scaled_axis(Vector3::new(step[0], step[1], step[2])).into_inner();
            let cand = Pose::new(
                orthonormalize(&(dr * pose.rotation)),
                pose.translation + Vector3::new(step[3], step[4], step[5]),
            );
            match cost(&cand) {
                Some(c) if c < current => {
                    let small = step.norm() < lit(1e-12);
                    pose = cand;
                    current = c;
                    mu = (mu / lit(10.0)).max(lit(1e-12));
                    improved = !small;
                    break;
                }
                _ => mu *= lit(10.0),
            }
        }
        if !improved {
            break;
        }
    }
    pose
}

/// Inliers within five standard deviations of isotropic pixel noise, the
/// deviation estimated from the median residual (a Rayleigh median is
/// 1.1774 sigma). The cut never exceeds `thresh` nor drops below a
/// thousandth of it.
fn trimmed_inliers<T: Real>(pose: &Pose<T>, k: &Intrinsics<T>, corrs: &[Correspondence<T>], inliers: &[usize], thresh: T) -> Vec<usize> {
    let res: Vec<T> = inliers
        .iter()
        .map(|&i| reprojection_error(pose, k, &corrs[i]).unwrap_or(thresh))
        .collect();
    let mut sorted = res.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut cut = lit::<T>(5.0 / 1.1774) * sorted[sorted.len() / 2];
    if cut < thresh * lit(1e-3) {
        cut = thresh * lit(1e-3);
    }
    if cut > thresh {
        cut = thresh;
    }
    inliers.iter().zip(&res).filter(|(_, e)| **e <= cut).map(|(&i, _)| i).collect()
}

/// Indices within `thresh` and the truncated squared-error cost
/// `sum(min(e^2, thresh^2))` over all correspondences.
fn inliers_of<T: Real>(pose: &Pose<T>, k: &Intrinsics<T>, corrs: &[Correspondence<T>], thresh: T) -> (Vec<usize>, T) {
    let mut idx = Vec::new();
    let mut cost = T::zero();
    for (i, c) in corrs.iter().enumerate() {
        match reprojection_error(pose, k, c) {
            Some(e) if e <= thresh => {
                idx.push(i);
                cost += e * e;
            }
            _ => cost += thresh * thresh,
        }
    }
    (idx, cost)
}

/// Robust pose from correspondences: minimal solves on random samples of
/// distinct model points scored by truncated reprojection error, then a
/// refit on the best consensus set.
pub fn ransac_pnp<T: Real>(
    corrs: &[Correspondence<T>],
    k: &Intrinsics<T>,
    cfg: &RansacConfig,
) -> Result<RansacResult<T>> {
    let need = cfg.min_inliers.max(cfg.sample_size).max(4);
    if corrs.len() < need {
        return Err(GeometryError::TooFewCorrespondences {
            got: corrs.len(),
            need,
        });
    }
    let thresh = lit::<T>(cfg.inlier_px);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<usize>, T, Pose<T>)> = None;
    let size = cfg.sample_size.max(4);
    for _ in 0..cfg.iterations {
        let mut picked = None;
        for _ in 0..20 {
            let s = sample(&mut rng, corrs.len(), size).into_vec();
            let distinct = s
                .iter()
                .enumerate()
                .all(|(a, &i)| s[..a].iter().all(|&j| corrs[j].point != corrs[i].point));
            if distinct {
                picked = Some(s);
                break;
            }
        }
        let Some(s) = picked else { continue };
        let subset: Vec<Correspondence<T>> = s.iter().map(|&i| corrs[i]).collect();
        let Ok(pose) = epnp(&subset, k) else { continue };
        if !pose.rotation.iter().all(|v| v.is_finite()) || !pose.translation.iter().all(|v| v.is_finite()) {
            continue;
        }
        let (idx, err) = inliers_of(&pose, k, corrs, thresh);
        let better = match &best {
            None => true,
            Some((bi, be, _)) => err < *be || (err == *be && idx.len() > bi.len()),
        };
        if better {
            best = Some((idx, err, pose));
        }
    }
    let Some((mut inliers, _, mut pose)) = best else {
        return Err(GeometryError::NoPose {
            inliers: 0,
            need: cfg.min_inliers,
        });
    };
    if inliers.len() < cfg.min_inliers {
        return Err(GeometryError::NoPose {
            inliers: inliers.len(),
            need: cfg.min_inliers,
        });
    }
    if cfg.refine {
        for _ in 0..3 {
            let set: Vec<Correspondence<T>> = inliers.iter().map(|&i| corrs[i]).collect();
            let refined = refine_pose(&pose, &set, k, cfg.refine_iterations);
            let (idx, _) = inliers_of(&refined, k, corrs, thresh);
            if idx.len() < inliers.len() {
                break;
            }
            let same = idx == inliers;
            pose = refined;
            inliers = idx;
            if same {
                break;
            }
        }
        for _ in 0..3 {
            let kept = trimmed_inliers(&pose, k, corrs, &inliers, thresh);
            if kept.len() == inliers.len() || kept.len() < cfg.min_inliers {
                break;
            }
            let set: Vec<Correspondence<T>> = kept.iter().map(|&i| corrs[i]).collect();
            pose = refine_pose(&pose, &set, k, cfg.refine_iterations);
            inliers = kept;
        }
    }
    let set: Vec<Correspondence<T>> = inliers.iter().map(|&i| corrs[i]).collect();
    let mean_error = mean_error(&pose, k, &set);
    Ok(RansacResult {
        pose,
        inliers,
        mean_error,
    })
}
