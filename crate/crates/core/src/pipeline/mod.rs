//! Training, inference and evaluation wired from a single [`RunConfig`].

pub mod eval;
pub mod infer;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorError;
use crate::data::{load_bop_models, load_bop_scene, synth_generate, AugmentationConfig, DataError, Mesh, SceneSample, SynthConfig};
use crate::geometry::{IcpConfig, RansacConfig};
use crate::loss::{LossConfig, LossError};
use crate::metrics::EvalConfig;
use crate::network::{NetworkConfig, PoseNet};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, TensorError};

pub use eval::{evaluate_dataset, write_bop_results, EvalOutcome};
pub use infer::{infer, infer_sample, DetectionRecord, ImageDetections};
pub use train::{train, TrainReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("checkpoint does not match the configuration: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// A synthetic object: a cuboid with one colour per face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuboidSpec {
    /// Side lengths along x, y, z in millimetres.
    pub extents: [f64; 3],
    /// Face colours in the order +x, -x, +y, -y, +z, -z.
    pub colors: [[f32; 3]; 6],
    #[serde(default = "one")]
    pub subdivisions: usize,
    #[serde(default)]
    pub symmetric: bool,
}

fn one() -> usize {
    1
}

impl CuboidSpec {
    pub fn mesh(&self, class_id: usize) -> Mesh {
        let mut m = Mesh::cuboid(class_id, self.extents, self.subdivisions, self.colors);
        m.symmetric = self.symmetric;
        m
    }
}

/// Default pair of desk-sized boxes with distinct face colours.
pub fn default_cuboids() -> Vec<CuboidSpec> {
    vec![
        CuboidSpec {
            extents: [160.0, 100.0, 70.0],
            colors: [
                [0.90, 0.15, 0.15],
                [0.15, 0.75, 0.20],
                [0.20, 0.30, 0.90],
                [0.95, 0.85, 0.15],
                [0.85, 0.20, 0.85],
                [0.15, 0.80, 0.85],
            ],
            subdivisions: 1,
            symmetric: false,
        },
        CuboidSpec {
            extents: [90.0, 90.0, 150.0],
            colors: [
                [0.95, 0.55, 0.10],
                [0.45, 0.20, 0.70],
                [0.60, 0.90, 0.30],
                [0.10, 0.45, 0.45],
                [0.98, 0.98, 0.98],
                [0.35, 0.25, 0.15],
            ],
            subdivisions: 1,
            symmetric: false,
        },
    ]
}

/// Either a BOP directory or synthetic cuboid scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bop_root: Option<PathBuf>,
    pub scenes: Vec<usize>,
    pub synthetic: SynthConfig,
    pub num_images: usize,
    pub objects: Vec<CuboidSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            bop_root: None,
            scenes: vec![0],
            synthetic: SynthConfig::default(),
            num_images: 32,
            objects: default_cuboids(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate multiplier applied on a loss plateau.
    pub plateau_factor: f64,
    /// Epochs without improvement of the epoch-mean loss before decaying.
    pub plateau_patience: usize,
    /// Stops training after this many steps when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 200,
            plateau_factor: 0.1,
            plateau_patience: 2,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub augment: bool,
    /// Keeps backbone weights at their initial values.
    pub freeze_backbone: bool,
    /// Writes a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            augment: true,
            freeze_backbone: false,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub ransac: RansacConfig,
    /// Refines poses with ICP against the depth image when one is present.
    pub icp: bool,
    pub icp_config: IcpConfig,
    /// Upper bound on model and scene points used by ICP.
    pub icp_points: usize,
    /// Mask score above which a depth pixel joins the ICP scene cloud.
    pub mask_threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            ransac: RansacConfig::default(),
            icp: false,
            icp_config: IcpConfig::default(),
            icp_points: 1500,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub checkpoint: PathBuf,
    /// JSON-lines loss log.
    pub train_log: PathBuf,
    /// Directory for detections, result files and reports.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("run/model.ckpt"),
            train_log: PathBuf::from("run/train_log.jsonl"),
            output: PathBuf::from("run"),
        }
    }
}

/// Everything a run needs; serialised as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dataset = DatasetConfig::default();
        let network = NetworkConfig {
            num_classes: dataset.objects.len(),
            ..NetworkConfig::default()
        };
        Self {
            seed: 0,
            dataset,
            network,
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        std::fs::write(path, self.to_toml()).map_err(|e| PipelineError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let s = &self.dataset.synthetic;
        if s.width == 0 || s.height == 0 || !s.width.is_multiple_of(32) || !s.height.is_multiple_of(32) {
            return bad(format!("image size {}x{} must be a positive multiple of 32", s.width, s.height));
        }
        if self.optimizer.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.optimizer.adam.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if self.network.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.dataset.bop_root.is_none() && self.dataset.objects.len() != self.network.num_classes {
            return bad(format!(
                "{} synthetic objects but network.num_classes = {}",
                self.dataset.objects.len(),
                self.network.num_classes
            ));
        }
        if self.network.anchors.per_location() == 0 {
            return bad("anchors need at least one scale and one ratio".into());
        }
        Ok(())
    }
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    Ok(())
}

/// Meshes (class ids `1..=K`) and their annotated images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meshes: Vec<Mesh>,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn mesh(&self, class_id: usize) -> Option<&Mesh> {
        self.meshes.iter().find(|m| m.class_id == class_id)
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.width, s.height))
    }
}

/// Loads the BOP scenes or renders the synthetic set, deterministically in
/// `seed`.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    match &cfg.bop_root {
        Some(root) => {
            let meshes = load_bop_models(root)?;
            let mut samples = Vec::new();
            for &scene in &cfg.scenes {
                samples.extend(load_bop_scene(root, scene, &meshes)?);
            }
            Ok(Dataset { meshes, samples })
        }
        None => {
            let meshes: Vec<Mesh> = cfg.objects.iter().enumerate().map(|(i, o)| o.mesh(i + 1)).collect();
            let samples = synth_generate(&meshes, cfg.num_images, &cfg.synthetic, seed)?;
            Ok(Dataset { meshes, samples })
        }
    }
}

/// Writes the parameters with the network configuration as metadata.
pub fn save_model(path: &Path, net: &PoseNet<f32>) -> Result<()> {
    let meta = toml::to_string(&net.config).expect("network config serialises");
    write_checkpoint(path, &meta, &net.params)?;
    Ok(())
}

/// Restores a network from a checkpoint. With `expected` set, the stored
/// configuration must equal it.
pub fn load_model(path: &Path, expected: Option<&NetworkConfig>) -> Result<PoseNet<f32>> {
    let ckpt = read_checkpoint::<f32>(path)?;
    let config: NetworkConfig = toml::from_str(&ckpt.metadata)
        .map_err(|e| PipelineError::CheckpointMismatch(format!("unreadable network metadata: {e}")))?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(PipelineError::CheckpointMismatch(format!(
                "checkpoint network\n{}\nconfigured network\n{}",
                toml::to_string(&config).unwrap_or_default(),
                toml::to_string(exp).unwrap_or_default()
            )));
        }
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = PoseNet::new(config, &mut rng);
    net.params
        .load_from(&ckpt.params)
        .map_err(|e| PipelineError::CheckpointMismatch(e.to_string()))?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_training_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.optimizer.adam.learning_rate, 1e-5);
        assert_eq!(c.optimizer.batch_size, 8);
        assert_eq!(c.optimizer.epochs, 200);
        assert_eq!(c.optimizer.plateau_factor, 0.1);
        assert_eq!(c.optimizer.plateau_patience, 2);
        assert_eq!(c.infer.score_threshold, 0.5);
        assert!(!c.train.freeze_backbone);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_is_lossless() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.optimizer.max_steps = Some(123);
        c.dataset.bop_root = Some(PathBuf::from("/data/lm"));
        c.network.pyramid.aggregation = crate::network::Aggregation::Fpn;
        c.augmentation.add.range = [-0.1, 0.3];
        c.eval.symmetric_classes = vec![2];
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert_eq!(RunConfig::from_toml(&RunConfig::default().to_toml()).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml("seed = 5\n[optimizer]\nbatch_size = 2\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.optimizer.batch_size, 2);
        assert_eq!(c.optimizer.epochs, 200);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml("[optimizer]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::from_toml("[dataset.synthetic]\nwidth = 100\n").is_err());
        assert!(RunConfig::from_toml("[network]\nnum_classes = 3\n").is_err());
        assert!(RunConfig::from_toml("seed = \"x\"").is_err());
    }
}
