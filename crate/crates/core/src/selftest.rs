//! Built-in numerical checks: finite-difference gradients of every
//! differentiable op and of the full training loss, plus roundtrips of the
//! geometry, anchor and metric code.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::anchors::{
    assign_targets, decode_correspondences, encode_correspondences, generate_anchors, AnchorSpec, BBox, GroundTruth,
};
use crate::geometry::{icp_refine, ransac_pnp, Correspondence, IcpConfig, Intrinsics, Pose, RansacConfig};
use crate::loss::{network_loss, ImageTargets, LossConfig};
use crate::metrics::{add_score, adds_score};
use crate::network::{Aggregation, BackboneConfig, HeadConfig, NetworkConfig, PoseNet, PyramidConfig};
use crate::tensor::{Shape, Tape, Tensor, TensorError, Var};

/// Random instances per gradient check.
pub const GRADIENT_INSTANCES: usize = 20;
/// Largest accepted relative error of a gradient entry.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-4;
/// Relative errors are taken against at least this magnitude.
const ERROR_FLOOR: f64 = 1e-3;

/// A differentiable operation checked against central differences.
pub trait DiffOp {
    fn name(&self) -> String;

    /// Draws the inputs of one instance.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>>;

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>, String>;

    /// Gradient of `sum(dout * forward(inputs))` with respect to each input.
    fn backward(&self, inputs: &[Tensor<f64>], dout: &[f64]) -> Result<Vec<Vec<f64>>, String>;
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Largest error seen, in the check's own unit.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub message: Option<String>,
}

impl CheckResult {
    fn new(name: impl Into<String>, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error <= tolerance,
            message: None,
        }
    }

    fn failed(name: impl Into<String>, instances: usize, tolerance: f64, message: String) -> Self {
        Self {
            name: name.into(),
            instances,
            max_error: f64::NAN,
            tolerance,
            passed: false,
            message: Some(message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = write!(
                s,
                "{} {:<28} n={:<4} max_err={:.3e} tol={:.1e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.instances,
                c.max_error,
                c.tolerance
            );
            if let Some(m) = &c.message {
                let _ = write!(s, "  {m}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "{} of {} checks passed in {:.1} s",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len(),
            self.seconds
        );
        s
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so that steps never cross the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn random_shape(rng: &mut ChaCha8Rng, even: bool) -> Shape {
    let mut extent = || {
        let e = rng.random_range(1..=4usize);
        if even {
            2 * e
        } else {
            e + 1
        }
    };
    let (h, w) = (extent(), extent());
    Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), h, w)
}

/// Ops recorded on a [`Tape`], differentiated by its backward pass.
#[derive(Debug, Clone, Copy)]
pub enum TapeOp {
    Conv { stride: usize, pad: usize },
    Relu,
    Sigmoid,
    Add,
    Up2,
    Down2,
}

impl TapeOp {
    pub fn all() -> Vec<TapeOp> {
        vec![
            TapeOp::Conv { stride: 1, pad: 1 },
            TapeOp::Conv { stride: 2, pad: 1 },
            TapeOp::Conv { stride: 1, pad: 0 },
            TapeOp::Relu,
            TapeOp::Sigmoid,
            TapeOp::Add,
            TapeOp::Up2,
            TapeOp::Down2,
        ]
    }

    fn record(self, tape: &mut Tape<f64>, inputs: &[Tensor<f64>]) -> Result<(Vec<Var>, Var), String> {
        let err = |e: TensorError| e.to_string();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let t = t.clone();
                tape.input(if i == 0 { t.with_grad() } else { t })
            })
            .collect();
        let out = match self {
            TapeOp::Conv { stride, pad } => tape.conv2d(vars[0], vars[1], vars[2], stride, pad).map_err(err)?,
            TapeOp::Add => tape.add(vars[0], vars[1]).map_err(err)?,
            TapeOp::Relu => tape.relu(vars[0]),
            TapeOp::Sigmoid => tape.sigmoid(vars[0]),
            TapeOp::Up2 => tape.up2(vars[0]),
            TapeOp::Down2 => tape.down2(vars[0]).map_err(err)?,
        };
        Ok((vars, out))
    }
}

impl DiffOp for TapeOp {
    fn name(&self) -> String {
        match self {
            TapeOp::Conv { stride, pad } => format!("conv2d(stride {stride}, pad {pad})"),
            TapeOp::Relu => "relu".into(),
            TapeOp::Sigmoid => "sigmoid".into(),
            TapeOp::Add => "add".into(),
            TapeOp::Up2 => "resize up x2".into(),
            TapeOp::Down2 => "resize down x2".into(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        match *self {
            TapeOp::Conv { pad, .. } => {
                let k = if pad == 0 { rng.random_range(1..=2) } else { 3 };
                let cin = rng.random_range(1..=3);
                let cout = rng.random_range(1..=5);
                let n = rng.random_range(1..=2);
                let (h, w) = (2 * rng.random_range(2..=4), 2 * rng.random_range(2..=4));
                vec![
                    random_tensor(rng, Shape::new(n, cin, h, w)),
                    random_tensor(rng, Shape::new(cout, cin, k, k)),
                    random_tensor(rng, Shape::new(1, cout, 1, 1)),
                ]
            }
            TapeOp::Relu => {
                let s = random_shape(rng, false);
                vec![away_from_zero(rng, s)]
            }
            TapeOp::Sigmoid | TapeOp::Up2 => {
                let s = random_shape(rng, false);
                vec![random_tensor(rng, s)]
            }
            TapeOp::Down2 => {
                let s = random_shape(rng, true);
                vec![random_tensor(rng, s)]
            }
            TapeOp::Add => {
                let s = random_shape(rng, false);
                vec![random_tensor(rng, s), random_tensor(rng, s)]
            }
        }
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>, String> {
        let mut tape = Tape::new();
        let (_, out) = self.record(&mut tape, inputs)?;
        Ok(tape.value(out).clone())
    }

    fn backward(&self, inputs: &[Tensor<f64>], dout: &[f64]) -> Result<Vec<Vec<f64>>, String> {
        let mut tape = Tape::new();
        let (vars, out) = self.record(&mut tape, inputs)?;
        tape.backward(vec![(out, dout.to_vec())]).map_err(|e| e.to_string())?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.input_grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect())
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Compares an op's backward pass with central differences on every input
/// entry of `instances` random draws.
pub fn gradient_check(op: &dyn DiffOp, instances: usize, seed: u64) -> CheckResult {
    let name = format!("grad {}", op.name());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let inputs = op.sample(&mut rng);
        let run = || -> Result<f64, String> {
            let out = op.forward(&inputs)?;
            let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ ((inst as u64) << 20));
            let dout: Vec<f64> = (0..out.len()).map(|_| wrng.random_range(-1.0..1.0)).collect();
            let objective = |xs: &[Tensor<f64>]| -> Result<f64, String> {
                Ok(op.forward(xs)?.values().iter().zip(&dout).map(|(a, b)| a * b).sum())
            };
            let grads = op.backward(&inputs, &dout)?;
            if grads.len() != inputs.len() {
                return Err(format!("{} gradients for {} inputs", grads.len(), inputs.len()));
            }
            let mut worst = 0.0f64;
            let mut probe = inputs.clone();
            for (i, g) in grads.iter().enumerate() {
                if g.len() != inputs[i].len() {
                    return Err(format!("input {i}: gradient has {} entries, expected {}", g.len(), inputs[i].len()));
                }
                for (j, &analytic) in g.iter().enumerate() {
                    let orig = inputs[i].values()[j];
                    probe[i].values_mut()[j] = orig + STEP;
                    let plus = objective(&probe)?;
                    probe[i].values_mut()[j] = orig - STEP;
                    let minus = objective(&probe)?;
                    probe[i].values_mut()[j] = orig;
                    worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * STEP)));
                }
            }
            Ok(worst)
        };
        match run() {
            Ok(e) if e.is_finite() => worst = worst.max(e),
            Ok(e) => return CheckResult::failed(name, inst + 1, GRADIENT_TOLERANCE, format!("instance {inst}: error {e}")),
            Err(m) => return CheckResult::failed(name, inst + 1, GRADIENT_TOLERANCE, format!("instance {inst}: {m}")),
        }
    }
    CheckResult::new(name, instances, worst, GRADIENT_TOLERANCE)
}

/// Configuration used by the loss gradient check: W=8, one anchor per
/// location, one class.
pub fn loss_check_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 1,
        backbone: BackboneConfig {
            stem_widths: [3, 4],
            stage_widths: [6, 8, 8],
            convs_per_stage: 1,
        },
        pyramid: PyramidConfig {
            width: 8,
            aggregation: Aggregation::Pfpn,
        },
        heads: HeadConfig {
            depth: 1,
            location_width: 8,
            mask_width: 8,
            correspondence_width: 8,
            l2_lambda: 0.01,
            prior: 0.3,
            output_std: 0.3,
        },
        anchors: AnchorSpec {
            base_sizes: [16.0, 32.0, 64.0],
            scales: vec![1.0],
            ratios: vec![1.0],
        },
    }
}

/// Finite-difference check of the weighted training loss, l2 term included,
/// against every parameter tensor of a small network on 32x32 images.
pub fn loss_gradient_check(instances: usize, seed: u64) -> CheckResult {
    const SIZE: usize = 32;
    const H: f64 = 1e-6;
    let name = "grad total_loss (network)";
    let cfg = loss_check_config();
    let loss_cfg = LossConfig::default();
    let anchors = match generate_anchors(SIZE, SIZE, &cfg.anchors) {
        Ok(a) => a,
        Err(e) => return CheckResult::failed(name, 0, GRADIENT_TOLERANCE, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut net = PoseNet::<f64>::new(cfg.clone(), &mut rng);
        let image = random_tensor(&mut rng, Shape::new(1, 3, SIZE, SIZE));
        // One object centred near a P3 anchor so that positives exist.
        let (cx, cy) = (
            4.0 + 8.0 * rng.random_range(0..4) as f64 + rng.random_range(-1.0..1.0),
            4.0 + 8.0 * rng.random_range(0..4) as f64 + rng.random_range(-1.0..1.0),
        );
        let half = rng.random_range(7.0..9.0);
        let corners = std::array::from_fn(|_| [cx + rng.random_range(-half..half), cy + rng.random_range(-half..half)]);
        let gt = GroundTruth {
            class_id: 1,
            bbox: BBox::new(cx - half, cy - half, cx + half, cy + half),
            corners,
        };
        let targets = match assign_targets(&anchors, &[gt]) {
            Ok(a) => vec![ImageTargets {
                assignment: a,
                mask: (0..16).map(|_| rng.random_range(0..2) as f32).collect(),
            }],
            Err(e) => return CheckResult::failed(name, inst, GRADIENT_TOLERANCE, e.to_string()),
        };
        let objective = |net: &PoseNet<f64>| -> Result<f64, String> {
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, image.clone()).map_err(|e| e.to_string())?;
            let (b, _) = network_loss(&tape, &out, &anchors, &targets, net.l2_penalty(), &loss_cfg).map_err(|e| e.to_string())?;
            Ok(b.total)
        };
        let analytic = |net: &mut PoseNet<f64>| -> Result<(), String> {
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, image.clone()).map_err(|e| e.to_string())?;
            let (_, seeds) = network_loss(&tape, &out, &anchors, &targets, net.l2_penalty(), &loss_cfg).map_err(|e| e.to_string())?;
            tape.backward(seeds).map_err(|e| e.to_string())?;
            net.params.zero_grad();
            tape.write_param_grads(&mut net.params).map_err(|e| e.to_string())?;
            net.accumulate_l2_grad().map_err(|e| e.to_string())
        };
        let mut run = || -> Result<f64, String> {
            analytic(&mut net)?;
            let mut worst = 0.0f64;
            for p in 0..net.params.len() {
                let n = net.params.by_index(p).len();
                let picks = [0, rng.random_range(0..n), n - 1];
                for j in picks {
                    let g = net.params.by_index(p).grad().ok_or("parameter without gradient")?[j];
                    let orig = net.params.by_index(p).values()[j];
                    net.params.by_index_mut(p).values_mut()[j] = orig + H;
                    let plus = objective(&net)?;
                    net.params.by_index_mut(p).values_mut()[j] = orig - H;
                    let minus = objective(&net)?;
                    net.params.by_index_mut(p).values_mut()[j] = orig;
                    let e = relative_error(g, (plus - minus) / (2.0 * H));
                    if e > GRADIENT_TOLERANCE {
                        return Err(format!("{}[{j}]: relative error {e:.3e}", net.params.name(p)));
                    }
                    worst = worst.max(e);
                }
            }
            Ok(worst)
        };
        match run() {
            Ok(e) => worst = worst.max(e),
            Err(m) => return CheckResult::failed(name, inst + 1, GRADIENT_TOLERANCE, format!("instance {inst}: {m}")),
        }
    }
    CheckResult::new(name, instances, worst, GRADIENT_TOLERANCE)
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let t = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-80.0..80.0), rng.random_range(500.0..1500.0));
    Pose::from_axis_angle(axis.normalize() * angle, t)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random_range(-extent..extent), rng.random_range(-extent..extent), rng.random_range(-extent..extent)))
        .collect()
}

fn pose_error(a: &Pose<f64>, b: &Pose<f64>) -> (f64, f64) {
    (a.rotation_error(b), a.translation_error(b))
}

/// RANSAC-PnP on noiseless projections; error is the larger of the
/// rotation error over 1e-4 rad and the translation error over 1e-2 mm.
fn pnp_roundtrip(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics::new(572.4, 573.6, 325.3, 242.0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let pose = random_pose(&mut rng);
        let corrs: Vec<_> = random_points(&mut rng, 24, 80.0)
            .into_iter()
            .filter_map(|p| k.project(&pose.transform(&p)).map(|px| Correspondence::new(px, p)))
            .collect();
        match ransac_pnp(&corrs, &k, &RansacConfig::default()) {
            Ok(fit) => {
                let (r, t) = pose_error(&fit.pose, &pose);
                worst = worst.max((r / 1e-4).max(t / 1e-2));
            }
            Err(e) => return CheckResult::failed("ransac_pnp roundtrip", instances, 1.0, e.to_string()),
        }
    }
    CheckResult::new("ransac_pnp roundtrip", instances, worst, 1.0)
}

/// ICP from a 5 degree / 10 mm perturbation; error in units of
/// 0.1 degree and 0.5 mm.
fn icp_roundtrip(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let pose = random_pose(&mut rng);
        let model = random_points(&mut rng, 400, 50.0);
        let scene: Vec<_> = model.iter().map(|p| pose.transform(p)).collect();
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let shift = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let delta = Pose::from_axis_angle(axis * 5f64.to_radians(), shift * 10.0);
        let init = Pose::new(delta.rotation * pose.rotation, pose.translation + delta.translation);
        let res = icp_refine(&model, &scene, &init, &IcpConfig::default());
        let (r, t) = pose_error(&res.pose, &pose);
        worst = worst.max((r / 0.1f64.to_radians()).max(t / 0.5));
    }
    CheckResult::new("icp roundtrip", instances, worst, 1.0)
}

/// Corner encode/decode roundtrip in pixels.
fn anchor_roundtrip(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = match generate_anchors(256, 192, &AnchorSpec::default()) {
        Ok(a) => a,
        Err(e) => return CheckResult::failed("anchor encode/decode", 0, 1e-6, e.to_string()),
    };
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let a = &anchors[rng.random_range(0..anchors.len())];
        let corners: [[f64; 2]; 8] = std::array::from_fn(|_| [rng.random_range(-50.0..300.0), rng.random_range(-50.0..250.0)]);
        let back = decode_correspondences(&encode_correspondences(&corners, a), a);
        for (c, b) in corners.iter().zip(&back) {
            worst = worst.max((c[0] - b[0]).abs()).max((c[1] - b[1]).abs());
        }
    }
    CheckResult::new("anchor encode/decode", instances, worst, 1e-6)
}

/// ADD against a direct loop, ADD-S against exhaustive search, and
/// ADD-S never above ADD. Error is relative.
fn metric_oracles(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let pts = random_points(&mut rng, 60, 60.0);
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let add_ref = pts.iter().map(|p| (a.transform(p) - b.transform(p)).norm()).sum::<f64>() / pts.len() as f64;
        let adds_ref = pts
            .iter()
            .map(|p| {
                let g = b.transform(p);
                pts.iter().map(|q| (a.transform(q) - g).norm()).fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / pts.len() as f64;
        let (add, adds) = (add_score(&pts, &a, &b), adds_score(&pts, &a, &b));
        if adds > add + 1e-9 * add {
            return CheckResult::failed("add/adds oracles", instances, 1e-9, format!("adds {adds} above add {add}"));
        }
        worst = worst
            .max((add - add_ref).abs() / add_ref.max(1e-12))
            .max((adds - adds_ref).abs() / adds_ref.max(1e-12));
    }
    CheckResult::new("add/adds oracles", instances, worst, 1e-9)
}

/// A stride-2 convolution equals the stride-1 result sampled at even
/// positions, and down-sampling undoes up-sampling.
fn resampling_equivalences(instances: usize, seed: u64) -> CheckResult {
    let name = "stride/resize equivalences";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inputs = TapeOp::Conv { stride: 1, pad: 1 }.sample(&mut rng);
        let full = TapeOp::Conv { stride: 1, pad: 1 }.forward(&inputs);
        let strided = TapeOp::Conv { stride: 2, pad: 1 }.forward(&inputs);
        let (full, strided) = match (full, strided) {
            (Ok(f), Ok(s)) => (f, s),
            (Err(e), _) | (_, Err(e)) => return CheckResult::failed(name, instances, 0.0, e),
        };
        let s = strided.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        worst = worst.max((strided.at(n, c, y, x) - full.at(n, c, 2 * y, 2 * x)).abs());
                    }
                }
            }
        }
        let shape = random_shape(&mut rng, false);
        let x = random_tensor(&mut rng, shape);
        let round = TapeOp::Up2.forward(std::slice::from_ref(&x)).and_then(|u| TapeOp::Down2.forward(&[u]));
        match round {
            Ok(r) if r.shape() == x.shape() => {
                for (a, b) in r.values().iter().zip(x.values()) {
                    worst = worst.max((a - b).abs());
                }
            }
            Ok(r) => return CheckResult::failed(name, instances, 0.0, format!("shape {} after up/down", r.shape())),
            Err(e) => return CheckResult::failed(name, instances, 0.0, e),
        }
    }
    CheckResult::new(name, instances, worst, 1e-12)
}

/// Runs every built-in check.
pub fn run_selftest(seed: u64) -> SelftestReport {
    run_selftest_with(seed, &[])
}

/// Runs the built-in checks followed by gradient checks of `extra` ops.
pub fn run_selftest_with(seed: u64, extra: &[&dyn DiffOp]) -> SelftestReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    let ops = TapeOp::all();
    let all: Vec<&dyn DiffOp> = ops.iter().map(|o| o as &dyn DiffOp).chain(extra.iter().copied()).collect();
    for (i, op) in all.into_iter().enumerate() {
        let c = gradient_check(op, GRADIENT_INSTANCES, seed.wrapping_add(i as u64));
        log::debug!("{} {}", c.name, c.max_error);
        checks.push(c);
    }
    checks.push(loss_gradient_check(GRADIENT_INSTANCES, seed.wrapping_add(100)));
    checks.push(resampling_equivalences(GRADIENT_INSTANCES, seed.wrapping_add(101)));
    checks.push(pnp_roundtrip(20, seed.wrapping_add(102)));
    checks.push(icp_roundtrip(10, seed.wrapping_add(103)));
    checks.push(anchor_roundtrip(200, seed.wrapping_add(104)));
    checks.push(metric_oracles(20, seed.wrapping_add(105)));
    SelftestReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}
