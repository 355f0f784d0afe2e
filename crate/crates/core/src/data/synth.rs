use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::mesh::Mesh;
use super::render::render;
use super::{projected_bbox, projected_corners, DataError, ObjectAnnotation, Result, SceneSample};
use crate::anchors::BBox;
use crate::geometry::{Intrinsics, Pose};

/// Camera, placement ranges and background settings for generated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub distance_mm: [f64; 2],
    /// Viewpoint azimuth around the object's z-axis, degrees.
    pub azimuth_deg: [f64; 2],
    /// Viewpoint elevation above the object's xy-plane, degrees.
    pub elevation_deg: [f64; 2],
    /// Rotation about the optical axis, degrees.
    pub roll_deg: [f64; 2],
    /// At most one instance per class in an image.
    pub unique_classes: bool,
    /// Largest intersection of two object boxes over the smaller box area.
    pub max_box_overlap: f64,
    /// Boxes keep this many pixels from the image border.
    pub margin_px: f64,
    /// Chance of a uniform-noise background instead of a flat colour.
    pub noise_background: f64,
    pub max_retries: usize,
    pub with_depth: bool,
    pub scene_id: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 192,
            focal: 220.0,
            min_objects: 1,
            max_objects: 4,
            distance_mm: [600.0, 1200.0],
            azimuth_deg: [-180.0, 180.0],
            elevation_deg: [-70.0, 70.0],
            roll_deg: [-180.0, 180.0],
            unique_classes: true,
            max_box_overlap: 0.3,
            margin_px: 2.0,
            noise_background: 0.5,
            max_retries: 200,
            with_depth: true,
            scene_id: 0,
        }
    }
}

impl SynthConfig {
    /// Principal point at the image centre; pixel `(x, y)` samples `(x, y)`.
    pub fn intrinsics(&self) -> Intrinsics<f64> {
        Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }
}

/// Renders `n` labelled scenes of the given meshes.
///
/// Sample `i` draws from its own stream of a generator seeded by `seed`, so
/// any sample can be reproduced alone.
pub fn synth_generate(meshes: &[Mesh], n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SceneSample>> {
    (0..n).map(|i| synth_sample(meshes, i, cfg, seed)).collect()
}

pub fn synth_sample(meshes: &[Mesh], index: usize, cfg: &SynthConfig, seed: u64) -> Result<SceneSample> {
    let err = |message: &str| DataError::Generation {
        index,
        message: message.into(),
    };
    if meshes.is_empty() {
        return Err(err("no meshes"));
    }
    if cfg.min_objects == 0 || cfg.max_objects < cfg.min_objects {
        return Err(err("invalid object count range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let k = cfg.intrinsics();

    let wanted = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let chosen: Vec<usize> = if cfg.unique_classes {
        let mut ids: Vec<usize> = (0..meshes.len()).collect();
        ids.shuffle(&mut rng);
        ids.truncate(wanted);
        ids
    } else {
        (0..wanted).map(|_| rng.random_range(0..meshes.len())).collect()
    };

    let mut placed: Vec<(usize, Pose<f64>, BBox)> = Vec::new();
    for &m in &chosen {
        for _ in 0..cfg.max_retries {
            let pose = sample_pose(&mut rng, cfg, &k);
            let Some(bbox) = projected_bbox(&meshes[m], &pose, &k) else {
                continue;
            };
            if inside(&bbox, cfg) && placed.iter().all(|(_, _, b)| overlap(b, &bbox) <= cfg.max_box_overlap) {
                placed.push((m, pose, bbox));
                break;
            }
        }
    }
    if placed.is_empty() {
        return Err(err("no object could be placed inside the frustum"));
    }

    let background = if rng.random_bool(cfg.noise_background.clamp(0.0, 1.0)) {
        let mut img = RgbImage::new(cfg.width, cfg.height);
        img.data.iter_mut().for_each(|v| *v = rng.random());
        img
    } else {
        RgbImage::filled(cfg.width, cfg.height, [rng.random(), rng.random(), rng.random()])
    };
    let scene: Vec<(&Mesh, Pose<f64>)> = placed.iter().map(|&(m, p, _)| (&meshes[m], p)).collect();
    let mut rendering = render(&scene, &k, background);
    rendering.rgb.quantize();

    let objects = placed
        .iter()
        .enumerate()
        .map(|(i, &(m, pose, bbox))| ObjectAnnotation {
            class_id: meshes[m].class_id,
            pose,
            bbox,
            mask: rendering.mask(i),
            corners: projected_corners(&meshes[m], &pose, &k).expect("placed objects are in front of the camera"),
        })
        .collect();
    Ok(SceneSample {
        scene_id: cfg.scene_id,
        image_id: index,
        width: cfg.width,
        height: cfg.height,
        intrinsics: k,
        rgb: rendering.rgb,
        depth: cfg.with_depth.then_some(rendering.depth),
        objects,
    })
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Looks at the object from the sampled viewpoint, rolls about the optical
/// axis and places the origin behind a random pixel.
fn sample_pose(rng: &mut ChaCha8Rng, cfg: &SynthConfig, k: &Intrinsics<f64>) -> Pose<f64> {
    let az = uniform(rng, cfg.azimuth_deg).to_radians();
    let el = uniform(rng, cfg.elevation_deg).to_radians();
    let roll = uniform(rng, cfg.roll_deg).to_radians();
    let dist = uniform(rng, cfg.distance_mm);
    let u = rng.random_range(0.0..cfg.width as f64);
    let v = rng.random_range(0.0..cfg.height as f64);

    let to_camera = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
    let z = -to_camera;
    let x = Vector3::z().cross(&z).try_normalize(1e-9).unwrap_or_else(Vector3::x);
    let y = z.cross(&x);
    let look = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), roll).into_inner() * look;
    Pose::new(rotation, k.backproject(u, v, dist))
}

fn inside(b: &BBox, cfg: &SynthConfig) -> bool {
    let m = cfg.margin_px;
    b.x1 >= m && b.y1 >= m && b.x2 <= cfg.width as f64 - 1.0 - m && b.y2 <= cfg.height as f64 - 1.0 - m
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let smaller = a.area().min(b.area());
    if smaller <= 0.0 {
        return 1.0;
    }
    w * h / smaller
}
