use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{create_parent, save_model, Dataset, PipelineError, Result, RunConfig};
use crate::anchors::{assign_targets, generate_anchors, Anchor};
use crate::data::augment;
use crate::loss::{network_loss, ImageTargets, LossBreakdown};
use crate::network::PoseNet;
use crate::tensor::{Adam, Shape, Tape, Tensor};

/// Loss history of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub step_losses: Vec<LossBreakdown>,
    /// Mean total loss of every finished epoch.
    pub epoch_losses: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub learning_rates: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().map(|l| l.total)
    }
}

#[derive(Serialize)]
struct StepLog<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Serialize)]
struct EpochLog {
    epoch: usize,
    mean_total: f64,
    lr: f64,
}

/// Reduces the learning rate when the monitored loss stops improving.
#[derive(Debug, Clone)]
pub struct Plateau {
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns the learning rate to use after an epoch with mean loss `loss`.
    pub fn update(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

/// Per-image targets for the given anchors.
pub fn build_targets(dataset: &Dataset, anchors: &[Anchor], num_classes: usize) -> Result<Vec<ImageTargets>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            Ok(ImageTargets {
                assignment: assign_targets(anchors, &s.ground_truth())?,
                mask: s.mask_targets(num_classes),
            })
        })
        .collect()
}

/// Trains a fresh network on `dataset`.
///
/// Checkpoints go to `cfg.paths.checkpoint` and step losses to
/// `cfg.paths.train_log` when `write_files` is set.
pub fn train(cfg: &RunConfig, dataset: &Dataset, write_files: bool) -> Result<(PoseNet<f32>, TrainReport)> {
    cfg.validate()?;
    let (width, height) = dataset
        .image_size()
        .ok_or_else(|| PipelineError::Config("dataset has no images".into()))?;
    if dataset.samples.iter().any(|s| (s.width, s.height) != (width, height)) {
        return Err(PipelineError::Config("all images must share one size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = PoseNet::<f32>::new(cfg.network.clone(), &mut rng);
    let anchors = generate_anchors(width, height, &cfg.network.anchors)?;
    let targets = build_targets(dataset, &anchors, cfg.network.num_classes)?;
    let frozen: Vec<usize> = if cfg.train.freeze_backbone {
        (0..net.params.len()).filter(|&i| net.params.name(i).starts_with("backbone.")).collect()
    } else {
        Vec::new()
    };

    let mut log = if write_files {
        create_parent(&cfg.paths.train_log)?;
        let f = File::create(&cfg.paths.train_log).map_err(|e| PipelineError::io(&cfg.paths.train_log, e))?;
        Some(BufWriter::new(f))
    } else {
        None
    };
    let mut write_log = |line: String| -> Result<()> {
        if let Some(w) = log.as_mut() {
            writeln!(w, "{line}").map_err(|e| PipelineError::io(&cfg.paths.train_log, e))?;
        }
        Ok(())
    };

    let mut adam = Adam::new(cfg.optimizer.adam, &net.params);
    let mut plateau = Plateau::new(cfg.optimizer.plateau_factor, cfg.optimizer.plateau_patience);
    let mut report = TrainReport {
        steps: 0,
        epochs: 0,
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        learning_rates: Vec::new(),
    };
    let max_steps = cfg.optimizer.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    'epochs: for epoch in 0..cfg.optimizer.epochs {
        order.shuffle(&mut rng);
        let lr = adam.learning_rate();
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.optimizer.batch_size) {
            if report.steps >= max_steps {
                break;
            }
            let input = batch_tensor(dataset, batch, cfg, &mut rng);
            let batch_targets: Vec<ImageTargets> = batch.iter().map(|&i| targets[i].clone()).collect();
            let loss = train_step(&mut net, &mut adam, input, &anchors, &batch_targets, cfg, &frozen)?;
            write_log(
                serde_json::to_string(&StepLog {
                    epoch,
                    step: report.steps,
                    lr,
                    loss: &loss,
                })
                .expect("log serialises"),
            )?;
            if !loss.total.is_finite() {
                return Err(PipelineError::Config(format!("loss diverged at step {}", report.steps)));
            }
            epoch_sum += loss.total;
            epoch_batches += 1;
            report.steps += 1;
            report.step_losses.push(loss);
        }
        if epoch_batches == 0 {
            break 'epochs;
        }
        let mean = epoch_sum / epoch_batches as f64;
        report.epochs += 1;
        report.epoch_losses.push(mean);
        report.learning_rates.push(lr);
        log::info!("epoch {epoch}: mean loss {mean:.5}, lr {lr:e}");
        write_log(serde_json::to_string(&EpochLog { epoch, mean_total: mean, lr }).expect("log serialises"))?;
        adam.set_learning_rate(plateau.update(mean, lr));
        if write_files && cfg.train.checkpoint_every > 0 && (epoch + 1) % cfg.train.checkpoint_every == 0 {
            save_model(&cfg.paths.checkpoint, &net)?;
        }
        if report.steps >= max_steps {
            break;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| PipelineError::io(&cfg.paths.train_log, e))?;
    }
    if write_files {
        save_model(&cfg.paths.checkpoint, &net)?;
    }
    Ok((net, report))
}

/// Stacks (optionally augmented) images into an `N x 3 x H x W` tensor.
fn batch_tensor(dataset: &Dataset, batch: &[usize], cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let first = &dataset.samples[batch[0]];
    let plane = 3 * first.width * first.height;
    let mut values = Vec::with_capacity(batch.len() * plane);
    for &i in batch {
        let rgb = &dataset.samples[i].rgb;
        let t = if cfg.train.augment {
            augment(rgb, &cfg.augmentation, rng).to_tensor::<f32>()
        } else {
            rgb.to_tensor::<f32>()
        };
        values.extend_from_slice(t.values());
    }
    Tensor::from_vec(Shape::new(batch.len(), 3, first.height, first.width), values).expect("sizes match")
}

/// One forward/backward pass and Adam update.
pub fn train_step(
    net: &mut PoseNet<f32>,
    adam: &mut Adam<f32>,
    input: Tensor<f32>,
    anchors: &[Anchor],
    targets: &[ImageTargets],
    cfg: &RunConfig,
    frozen: &[usize],
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, input)?;
    let (loss, seeds) = network_loss(&tape, &out, anchors, targets, net.l2_penalty(), &cfg.loss)?;
    tape.backward(seeds)?;
    net.params.zero_grad();
    tape.write_param_grads(&mut net.params)?;
    net.accumulate_l2_grad()?;
    for &i in frozen {
        net.params.by_index_mut(i).zero_grad();
    }
    adam.step(&mut net.params)?;
    Ok(loss)
}

/// Writes the report as JSON next to the checkpoint.
pub fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(report).expect("report serialises")).map_err(|e| PipelineError::io(path, e))
}
