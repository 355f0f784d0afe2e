//! Training losses: focal classification for the location and mask heads,
//! smooth-L1 correspondence regression with an edge-length term, and their
//! weighted sum.
//!
//! Every loss returns its value together with the gradient with respect to
//! the head outputs, which seeds the tape's backward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{decode_correspondences, level_grids, Anchor, TargetAssignment, BOX_EDGES, CORR_DIM};
use crate::network::NetOutputs;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tape, Tensor, Var};

const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch of {outputs} outputs but {targets} target sets")]
    BatchSize { outputs: usize, targets: usize },
    #[error("{head} output has shape {got}, expected {expected}")]
    Shape {
        head: &'static str,
        got: Shape,
        expected: Shape,
    },
    #[error("assignment covers {got} anchors, expected {expected}")]
    AnchorCount { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub correspondence: f64,
    pub location: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            correspondence: 0.125,
            location: 1.0,
            mask: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrLossConfig {
    /// Transition between the quadratic and linear parts of smooth-L1.
    pub delta: f64,
    pub edge_weight: f64,
}

impl Default for CorrLossConfig {
    fn default() -> Self {
        Self {
            delta: 0.8,
            edge_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalConfig,
    pub correspondence: CorrLossConfig,
}

/// Focal loss of one probability and its derivative with respect to `p`.
pub fn focal(p: f64, positive: bool, cfg: &FocalConfig) -> (f64, f64) {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let FocalConfig { alpha, gamma } = *cfg;
    // d/dq of q^gamma, with 0^0 treated as 1.
    let dpow = |q: f64| if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
    if positive {
        let q = 1.0 - p;
        let v = -alpha * q.powf(gamma) * p.ln();
        let d = alpha * (dpow(q) * p.ln() - q.powf(gamma) / p);
        (v, d)
    } else {
        let v = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
        let d = -(1.0 - alpha) * (dpow(p) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p));
        (v, d)
    }
}

/// Smooth-L1 with transition `delta` and its derivative.
pub fn smooth_l1(x: f64, delta: f64) -> (f64, f64) {
    if x.abs() < delta {
        (0.5 * x * x / delta, x / delta)
    } else {
        (x.abs() - 0.5 * delta, x.signum())
    }
}

/// Loss of one positive anchor and its gradient with respect to `pred`.
pub fn correspondence_loss(
    pred: &[f64; CORR_DIM],
    target: &[f64; CORR_DIM],
    anchor: &Anchor,
    cfg: &CorrLossConfig,
) -> (f64, [f64; CORR_DIM]) {
    let mut grad = [0.0; CORR_DIM];
    let mut value = 0.0;
    for j in 0..CORR_DIM {
        let (v, d) = smooth_l1(pred[j] - target[j], cfg.delta);
        value += v;
        grad[j] = d;
    }
    if cfg.edge_weight != 0.0 {
        let p = decode_correspondences(pred, anchor);
        let g = decode_correspondences(target, anchor);
        let scale = [anchor.width(), anchor.height()];
        let per_edge = cfg.edge_weight / BOX_EDGES.len() as f64;
        for &(a, b) in &BOX_EDGES {
            let e = [p[b][0] - p[a][0], p[b][1] - p[a][1]];
            let len = e[0].hypot(e[1]);
            let gt_len = (g[b][0] - g[a][0]).hypot(g[b][1] - g[a][1]);
            let (v, d) = smooth_l1(len - gt_len, cfg.delta);
            value += per_edge * v;
            if len > 0.0 {
                for axis in 0..2 {
                    let dc = per_edge * d * e[axis] / len * scale[axis];
                    grad[2 * b + axis] += dc;
                    grad[2 * a + axis] -= dc;
                }
            }
        }
    }
    (value, grad)
}

/// Targets of one image: anchor assignment and the per-class mask at stride 8.
#[derive(Debug, Clone)]
pub struct ImageTargets {
    pub assignment: TargetAssignment,
    /// `K x H/8 x W/8` values in {0, 1}, class-major.
    pub mask: Vec<f32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub correspondence: f64,
    pub location: f64,
    pub mask: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self, w: &LossWeights) -> Self {
        self.total = w.correspondence * self.correspondence + w.location * self.location + w.mask * self.mask + self.l2;
        self
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.correspondence += other.correspondence;
        self.location += other.location;
        self.mask += other.mask;
        self.l2 += other.l2;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            correspondence: self.correspondence * s,
            location: self.location * s,
            mask: self.mask * s,
            l2: self.l2 * s,
            total: self.total * s,
        }
    }
}

/// Borrowed head outputs for a batch.
pub struct HeadValues<'a, T> {
    pub location: [&'a Tensor<T>; 3],
    pub correspondence: [&'a Tensor<T>; 3],
    pub mask: &'a Tensor<T>,
}

/// Gradients with respect to [`HeadValues`], flat in the same layouts.
#[derive(Debug, Clone)]
pub struct HeadGrads<T> {
    pub location: [Vec<T>; 3],
    pub correspondence: [Vec<T>; 3],
    pub mask: Vec<T>,
}

fn check_shape<T>(head: &'static str, t: &Tensor<T>, expected: Shape) -> Result<(), LossError>
where
    T: Scalar,
{
    if t.shape() != expected {
        return Err(LossError::Shape {
            head,
            got: t.shape(),
            expected,
        });
    }
    Ok(())
}

/// Weighted batch loss. `l2` is the precomputed regularisation term; it is
/// added to the total unchanged.
///
/// Location loss per image is summed over anchors and classes and divided by
/// `max(1, positives)`; mask loss is divided by the number of mask locations;
/// correspondence loss is averaged over positives. Each is then averaged
/// over the batch.
pub fn total_loss<T: Scalar>(
    out: &HeadValues<'_, T>,
    anchors: &[Anchor],
    targets: &[ImageTargets],
    l2: f64,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, HeadGrads<T>), LossError> {
    let n = out.mask.shape().n;
    if targets.len() != n {
        return Err(LossError::BatchSize {
            outputs: n,
            targets: targets.len(),
        });
    }
    let k = out.mask.shape().c;
    let (mh, mw) = (out.mask.shape().h, out.mask.shape().w);
    let (width, height) = (mw * 8, mh * 8);
    let a = out.correspondence[0].shape().c / CORR_DIM;
    let grids = level_grids(width, height, a);
    let total_anchors = grids[2].offset + grids[2].rows * grids[2].cols * a;
    if anchors.len() != total_anchors {
        return Err(LossError::AnchorCount {
            got: anchors.len(),
            expected: total_anchors,
        });
    }
    for (l, g) in grids.iter().enumerate() {
        check_shape("location", out.location[l], Shape::new(n, a * k, g.rows, g.cols))?;
        check_shape("correspondence", out.correspondence[l], Shape::new(n, a * CORR_DIM, g.rows, g.cols))?;
    }
    for t in targets {
        if t.assignment.labels.len() != total_anchors {
            return Err(LossError::AnchorCount {
                got: t.assignment.labels.len(),
                expected: total_anchors,
            });
        }
    }

    let w = &cfg.weights;
    let batch = n as f64;
    let mut sums = LossBreakdown::default();
    let mut grads = HeadGrads {
        location: std::array::from_fn(|l| vec![T::zero(); out.location[l].len()]),
        correspondence: std::array::from_fn(|l| vec![T::zero(); out.correspondence[l].len()]),
        mask: vec![T::zero(); out.mask.len()],
    };

    for (i, t) in targets.iter().enumerate() {
        let asg = &t.assignment;
        let npos = asg.num_positive();
        let loc_norm = npos.max(1) as f64;
        let corr_norm = npos.max(1) as f64;
        for (l, g) in grids.iter().enumerate() {
            let loc = out.location[l];
            let corr = out.correspondence[l];
            for y in 0..g.rows {
                for x in 0..g.cols {
                    for ai in 0..a {
                        let idx = g.offset + (y * g.cols + x) * a + ai;
                        let label = asg.labels[idx];
                        for c in 0..k {
                            let at = loc.index(i, ai * k + c, y, x);
                            let p = loc.values()[at].to_f64().unwrap_or(0.5);
                            let (v, d) = focal(p, label == c + 1, &cfg.focal);
                            sums.location += v / loc_norm;
                            grads.location[l][at] = T::lit(w.location * d / loc_norm / batch);
                        }
                        if label == 0 {
                            continue;
                        }
                        let mut pred = [0.0; CORR_DIM];
                        for (j, p) in pred.iter_mut().enumerate() {
                            *p = corr.at(i, ai * CORR_DIM + j, y, x).to_f64().unwrap_or(0.0);
                        }
                        let (v, d) = correspondence_loss(&pred, &asg.targets[idx], &anchors[idx], &cfg.correspondence);
                        sums.correspondence += v / corr_norm;
                        for (j, dj) in d.iter().enumerate() {
                            let at = corr.index(i, ai * CORR_DIM + j, y, x);
                            grads.correspondence[l][at] = T::lit(w.correspondence * dj / corr_norm / batch);
                        }
                    }
                }
            }
        }
        let locations = (mh * mw).max(1) as f64;
        let plane = k * mh * mw;
        for j in 0..plane {
            let at = i * plane + j;
            let p = out.mask.values()[at].to_f64().unwrap_or(0.5);
            let positive = t.mask.get(j).is_some_and(|&m| m > 0.5);
            let (v, d) = focal(p, positive, &cfg.focal);
            sums.mask += v / locations;
            grads.mask[at] = T::lit(w.mask * d / locations / batch);
        }
    }

    let mut breakdown = sums.scaled(1.0 / batch);
    breakdown.l2 = l2;
    Ok((breakdown.finish(w), grads))
}

/// Runs [`total_loss`] on recorded network outputs and returns tape seeds.
pub fn network_loss<T: Scalar>(
    tape: &Tape<T>,
    outputs: &NetOutputs,
    anchors: &[Anchor],
    targets: &[ImageTargets],
    l2: f64,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<(Var, Vec<T>)>), LossError> {
    let values = HeadValues {
        location: outputs.location.map(|v| tape.value(v)),
        correspondence: outputs.correspondence.map(|v| tape.value(v)),
        mask: tape.value(outputs.mask),
    };
    let (breakdown, grads) = total_loss(&values, anchors, targets, l2, cfg)?;
    let mut seeds = Vec::with_capacity(7);
    for (v, g) in outputs.location.into_iter().zip(grads.location) {
        seeds.push((v, g));
    }
    for (v, g) in outputs.correspondence.into_iter().zip(grads.correspondence) {
        seeds.push((v, g));
    }
    seeds.push((outputs.mask, grads.mask));
    Ok((breakdown, seeds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{assign_targets, generate_anchors, AnchorSpec, BBox, GroundTruth, Level};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_confident_correct_is_near_zero() {
        let (v, _) = focal(1.0 - 1e-7, true, &FocalConfig::default());
        assert!(v < 1e-12);
    }

    #[test]
    fn focal_half_probability_positive() {
        let (v, _) = focal(0.5, true, &FocalConfig::default());
        assert_relative_eq!(v, 0.25 * 0.25 * 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(v, 0.04332, epsilon = 1e-5);
    }

    #[test]
    fn focal_without_focusing_halves_cross_entropy() {
        let cfg = FocalConfig { alpha: 0.5, gamma: 0.0 };
        for p in [0.1, 0.37, 0.9] {
            assert_relative_eq!(focal(p, true, &cfg).0, -0.5 * f64::ln(p), epsilon = 1e-12);
            assert_relative_eq!(focal(p, false, &cfg).0, -0.5 * f64::ln(1.0 - p), epsilon = 1e-12);
        }
    }

    #[test]
    fn focal_clamps_out_of_range() {
        let (v, _) = focal(0.0, true, &FocalConfig::default());
        assert!(v.is_finite());
        assert_relative_eq!(v, -0.25 * (1.0 - 1e-7f64).powi(2) * 1e-7f64.ln(), epsilon = 1e-9);
    }

    fn anchor() -> Anchor {
        Anchor {
            bbox: BBox::new(10.0, 20.0, 50.0, 100.0),
            level: Level::P3,
        }
    }

    // Second implementation of the correspondence loss, written directly
    // from its definition in pixel coordinates.
    fn oracle(pred: &[f64; 16], target: &[f64; 16], an: &Anchor, delta: f64, ew: f64) -> f64 {
        let sl1 = |x: f64| {
            if x.abs() < delta {
                x * x / (2.0 * delta)
            } else {
                x.abs() - delta / 2.0
            }
        };
        let point: f64 = pred.iter().zip(target).map(|(p, t)| sl1(p - t)).sum();
        let px = |v: &[f64; 16], c: usize| {
            [
                an.bbox.x1 + v[2 * c] * (an.bbox.x2 - an.bbox.x1),
                an.bbox.y1 + v[2 * c + 1] * (an.bbox.y2 - an.bbox.y1),
            ]
        };
        let mut edges = Vec::new();
        for a in 0..8usize {
            for b in a + 1..8 {
                if (a ^ b).count_ones() == 1 {
                    edges.push((a, b));
                }
            }
        }
        assert_eq!(edges.len(), 12);
        let dist = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        let edge: f64 = edges
            .iter()
            .map(|&(a, b)| sl1(dist(px(pred, a), px(pred, b)) - dist(px(target, a), px(target, b))))
            .sum::<f64>()
            / 12.0;
        point + ew * edge
    }

    fn random16(rng: &mut ChaCha8Rng, spread: f64) -> [f64; 16] {
        std::array::from_fn(|_| rng.random_range(-spread..spread))
    }

    #[test]
    fn correspondence_zero_on_exact_prediction() {
        let t = random16(&mut ChaCha8Rng::seed_from_u64(0), 1.0);
        let (v, g) = correspondence_loss(&t, &t, &anchor(), &CorrLossConfig::default());
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn translation_leaves_edge_term_at_zero() {
        let t = random16(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        let mut p = t;
        for c in 0..8 {
            p[2 * c] += 0.3;
            p[2 * c + 1] -= 0.1;
        }
        let with = correspondence_loss(&p, &t, &anchor(), &CorrLossConfig::default()).0;
        let without = correspondence_loss(
            &p,
            &t,
            &anchor(),
            &CorrLossConfig {
                edge_weight: 0.0,
                ..CorrLossConfig::default()
            },
        )
        .0;
        assert!(without > 0.0);
        assert_relative_eq!(with, without, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn correspondence_matches_oracle(seed in 0u64..500, spread in 0.01f64..2.0, ew in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random16(&mut rng, 1.5);
            let p = random16(&mut rng, spread);
            let cfg = CorrLossConfig { delta: 0.8, edge_weight: ew };
            let got = correspondence_loss(&p, &t, &anchor(), &cfg).0;
            let want = oracle(&p, &t, &anchor(), 0.8, ew);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }

        #[test]
        fn correspondence_positive_unless_exact(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random16(&mut rng, 1.0);
            let mut p = t;
            let j = rng.random_range(0..16);
            p[j] += rng.random_range(1e-4..0.5);
            prop_assert!(correspondence_loss(&p, &t, &anchor(), &CorrLossConfig::default()).0 > 0.0);
        }

        #[test]
        fn correspondence_gradient_matches_differences(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random16(&mut rng, 1.0);
            let p = random16(&mut rng, 1.0);
            let cfg = CorrLossConfig::default();
            let (_, g) = correspondence_loss(&p, &t, &anchor(), &cfg);
            let h = 1e-7;
            for j in 0..16 {
                let (mut a, mut b) = (p, p);
                a[j] += h;
                b[j] -= h;
                let num = (correspondence_loss(&a, &t, &anchor(), &cfg).0 - correspondence_loss(&b, &t, &anchor(), &cfg).0) / (2.0 * h);
                prop_assert!((num - g[j]).abs() < 1e-4 * g[j].abs().max(1.0), "{} {} {}", j, num, g[j]);
            }
        }

        #[test]
        fn focal_gradient_matches_differences(p in 0.01f64..0.99, positive: bool, gamma in 0.0f64..3.0) {
            let cfg = FocalConfig { alpha: 0.25, gamma };
            let (_, d) = focal(p, positive, &cfg);
            let h = 1e-7;
            let num = (focal(p + h, positive, &cfg).0 - focal(p - h, positive, &cfg).0) / (2.0 * h);
            prop_assert!((num - d).abs() < 1e-5 * d.abs().max(1.0));
        }
    }

    struct Case {
        anchors: Vec<Anchor>,
        targets: Vec<ImageTargets>,
        loc: [Tensor<f64>; 3],
        corr: [Tensor<f64>; 3],
        mask: Tensor<f64>,
    }

    fn case(seed: u64, gts: &[Vec<GroundTruth>]) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = AnchorSpec {
            scales: vec![1.0],
            ratios: vec![1.0, 2.0],
            ..AnchorSpec::default()
        };
        let (w, h, k, a) = (64, 32, 2, 2);
        let anchors = generate_anchors(w, h, &spec).unwrap();
        let n = gts.len();
        let targets = gts
            .iter()
            .map(|g| ImageTargets {
                assignment: assign_targets(&anchors, g).unwrap(),
                mask: (0..k * (h / 8) * (w / 8)).map(|j| (j % 3 == 0) as u8 as f32).collect(),
            })
            .collect();
        let grids = level_grids(w, h, a);
        let loc = grids.map(|g| Tensor::from_fn(Shape::new(n, a * k, g.rows, g.cols), |_| rng.random_range(0.05..0.95)));
        let corr = grids.map(|g| Tensor::from_fn(Shape::new(n, a * 16, g.rows, g.cols), |_| rng.random_range(-1.0..2.0)));
        let mask = Tensor::from_fn(Shape::new(n, k, h / 8, w / 8), |_| rng.random_range(0.05..0.95));
        Case {
            anchors,
            targets,
            loc,
            corr,
            mask,
        }
    }

    fn gt(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruth {
        let corners = std::array::from_fn(|c| {
            [
                if c & 1 == 0 { x1 + 3.0 } else { x2 - 2.0 },
                if c & 2 == 0 { y1 + 1.0 } else { y2 - 4.0 } + if c & 4 == 0 { 0.0 } else { 2.0 },
            ]
        });
        GroundTruth {
            class_id,
            bbox: BBox::new(x1, y1, x2, y2),
            corners,
        }
    }

    fn eval(c: &Case, cfg: &LossConfig) -> (LossBreakdown, HeadGrads<f64>) {
        let values = HeadValues {
            location: [&c.loc[0], &c.loc[1], &c.loc[2]],
            correspondence: [&c.corr[0], &c.corr[1], &c.corr[2]],
            mask: &c.mask,
        };
        total_loss(&values, &c.anchors, &c.targets, 0.25, cfg).unwrap()
    }

    fn sample_gts() -> Vec<Vec<GroundTruth>> {
        vec![
            vec![gt(1, 2.0, 2.0, 34.0, 30.0), gt(2, 30.0, 0.0, 62.0, 32.0)],
            vec![],
        ]
    }

    #[test]
    fn breakdown_sums_to_total() {
        let c = case(2, &sample_gts());
        assert!(c.targets[0].assignment.num_positive() > 0);
        let cfg = LossConfig::default();
        let (b, _) = eval(&c, &cfg);
        let w = cfg.weights;
        assert_relative_eq!(
            b.total,
            w.correspondence * b.correspondence + w.location * b.location + w.mask * b.mask + b.l2,
            epsilon = 1e-12
        );
        assert_eq!(b.l2, 0.25);
    }

    #[test]
    fn zero_weight_removes_gradient() {
        let c = case(3, &sample_gts());
        let mut cfg = LossConfig::default();
        cfg.weights.correspondence = 0.0;
        let (_, g) = eval(&c, &cfg);
        assert!(g.correspondence.iter().flatten().all(|&x| x == 0.0));
        assert!(g.location[0].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn perfect_predictions_leave_only_l2() {
        let mut c = case(4, &sample_gts());
        let a = 2;
        let grids = level_grids(64, 32, a);
        for (i, t) in c.targets.iter().enumerate() {
            for (l, g) in grids.iter().enumerate() {
                for y in 0..g.rows {
                    for x in 0..g.cols {
                        for ai in 0..a {
                            let idx = g.offset + (y * g.cols + x) * a + ai;
                            for k in 0..2 {
                                let at = c.loc[l].index(i, ai * 2 + k, y, x);
                                c.loc[l].values_mut()[at] = if t.assignment.labels[idx] == k + 1 { 1.0 } else { 0.0 };
                            }
                            for j in 0..16 {
                                let at = c.corr[l].index(i, ai * 16 + j, y, x);
                                c.corr[l].values_mut()[at] = t.assignment.targets[idx][j];
                            }
                        }
                    }
                }
            }
            let plane = 2 * 4 * 8;
            for j in 0..plane {
                c.mask.values_mut()[i * plane + j] = t.mask[j] as f64;
            }
        }
        let (b, _) = eval(&c, &LossConfig::default());
        assert!(b.location < 1e-9 && b.mask < 1e-9, "{b:?}");
        assert!(b.correspondence < 1e-9, "{b:?}");
        assert_relative_eq!(b.total, 0.25, epsilon = 1e-8);
    }

    #[test]
    fn order_of_objects_does_not_matter() {
        let mut gts = sample_gts();
        let a = eval(&case(5, &gts), &LossConfig::default()).0;
        gts[0].reverse();
        let b = eval(&case(5, &gts), &LossConfig::default()).0;
        assert_relative_eq!(a.total, b.total, epsilon = 1e-12);
    }

    #[test]
    fn batch_gradients_match_differences() {
        let c = case(6, &sample_gts());
        let cfg = LossConfig::default();
        let (_, g) = eval(&c, &cfg);
        let h = 1e-6;
        let check = |which: usize, l: usize, at: usize| {
            let mut p = case(6, &sample_gts());
            let mut m = case(6, &sample_gts());
            let (gp, tp, tm) = match which {
                0 => (g.location[l][at], &mut p.loc[l], &mut m.loc[l]),
                1 => (g.correspondence[l][at], &mut p.corr[l], &mut m.corr[l]),
                _ => (g.mask[at], &mut p.mask, &mut m.mask),
            };
            tp.values_mut()[at] += h;
            tm.values_mut()[at] -= h;
            let num = (eval(&p, &cfg).0.total - eval(&m, &cfg).0.total) / (2.0 * h);
            assert!((num - gp).abs() < 1e-5 * gp.abs().max(1e-2), "{which} {l} {at}: {num} vs {gp}");
        };
        for l in 0..3 {
            for at in (0..c.loc[l].len()).step_by(7) {
                check(0, l, at);
            }
        }
        let pos = &c.targets[0].assignment.positives;
        let grids = level_grids(64, 32, 2);
        for &idx in pos.iter().take(4) {
            let l = grids.iter().rposition(|g| g.offset <= idx).unwrap();
            let g = grids[l];
            let cell = (idx - g.offset) / 2;
            let ai = (idx - g.offset) % 2;
            for j in 0..16 {
                check(1, l, c.corr[l].index(0, ai * 16 + j, cell / g.cols, cell % g.cols));
            }
        }
        for at in (0..c.mask.len()).step_by(5) {
            check(2, 0, at);
        }
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let mut c = case(7, &sample_gts());
        c.targets.pop();
        let values = HeadValues {
            location: [&c.loc[0], &c.loc[1], &c.loc[2]],
            correspondence: [&c.corr[0], &c.corr[1], &c.corr[2]],
            mask: &c.mask,
        };
        assert!(matches!(
            total_loss(&values, &c.anchors, &c.targets, 0.0, &LossConfig::default()),
            Err(LossError::BatchSize { outputs: 2, targets: 1 })
        ));
    }
}
