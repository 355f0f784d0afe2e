//! Datasets: BOP-format ingestion, a synthetic scene generator, image
//! augmentation and the small image/mesh IO they share.

pub mod augment;
pub mod bop;
pub mod image;
pub mod mesh;
pub mod render;
pub mod synth;

use std::path::Path;

use thiserror::Error;

use crate::anchors::{BBox, GroundTruth};
use crate::geometry::{project, Intrinsics, Pose};

pub use self::augment::{augment, AugmentationConfig, OpChance};
pub use self::bop::{load_bop_models, load_bop_scene, save_bop_models, save_bop_scene};
pub use self::image::RgbImage;
pub use self::mesh::Mesh;
pub use self::render::{render, Rendering};
pub use self::synth::{synth_generate, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: {message}")]
    Io { file: String, message: String },
    #[error("{file}: image error: {message}")]
    Image { file: String, message: String },
    #[error("{file}: {key}: {message}")]
    Format { file: String, key: String, message: String },
    #[error("synthetic scene {index}: {message}")]
    Generation { index: usize, message: String },
}

impl DataError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        DataError::Io {
            file: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn image(path: &Path, e: ::image::ImageError) -> Self {
        DataError::Image {
            file: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub(crate) fn format(path: &Path, key: impl Into<String>, message: impl Into<String>) -> Self {
        DataError::Format {
            file: path.display().to_string(),
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One annotated object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    /// 1-based class id.
    pub class_id: usize,
    /// Object-to-camera pose, millimetres.
    pub pose: Pose<f64>,
    pub bbox: BBox,
    /// Visible pixels, row-major, image-sized.
    pub mask: Vec<bool>,
    /// Projected 3D bounding box corners (px).
    pub corners: [[f64; 2]; 8],
}

impl ObjectAnnotation {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            class_id: self.class_id,
            bbox: self.bbox,
            corners: self.corners,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: usize,
    pub image_id: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics<f64>,
    pub rgb: RgbImage,
    /// Depth in millimetres, 0 where unknown.
    pub depth: Option<Vec<f32>>,
    pub objects: Vec<ObjectAnnotation>,
}

impl SceneSample {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.objects.iter().map(ObjectAnnotation::ground_truth).collect()
    }

    /// Class-major `K x H/8 x W/8` mask targets: a cell is on when any pixel
    /// of its 8x8 block belongs to an object of that class.
    pub fn mask_targets(&self, num_classes: usize) -> Vec<f32> {
        let (mw, mh) = (self.width / 8, self.height / 8);
        let mut out = vec![0.0; num_classes * mw * mh];
        for o in &self.objects {
            if o.class_id == 0 || o.class_id > num_classes {
                continue;
            }
            let plane = (o.class_id - 1) * mw * mh;
            for y in 0..mh * 8 {
                for x in 0..mw * 8 {
                    if o.mask[y * self.width + x] {
                        out[plane + (y / 8) * mw + x / 8] = 1.0;
                    }
                }
            }
        }
        out
    }
}

/// Projected 3D box corners of `mesh` under `pose`.
pub fn projected_corners(mesh: &Mesh, pose: &Pose<f64>, k: &Intrinsics<f64>) -> Option<[[f64; 2]; 8]> {
    let pts: Vec<_> = mesh
        .bounding_box()
        .corners
        .iter()
        .map(|c| nalgebra::Vector3::new(c[0], c[1], c[2]))
        .collect();
    let px = project(&pts, pose, k).ok()?;
    let mut out = [[0.0; 2]; 8];
    for (o, p) in out.iter_mut().zip(&px) {
        *o = [p.x, p.y];
    }
    Some(out)
}

/// Tight bounds of the projected mesh vertices.
pub fn projected_bbox(mesh: &Mesh, pose: &Pose<f64>, k: &Intrinsics<f64>) -> Option<BBox> {
    let px = project(&mesh.vertices, pose, k).ok()?;
    let pts: Vec<[f64; 2]> = px.iter().map(|p| [p.x, p.y]).collect();
    BBox::enclosing(&pts)
}
