use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use serde::Serialize;

use super::{Dataset, InferConfig, Result};
use crate::anchors::{decode_correspondences, generate_anchors, level_grids, Anchor, CORR_DIM};
use crate::data::{render, Mesh, RgbImage, SceneSample};
use crate::geometry::{icp_refine, ransac_pnp, Correspondence, Intrinsics, Pose};
use crate::network::PoseNet;
use crate::tensor::{Tape, Tensor};

/// One pose hypothesis for one class in one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub scene_id: usize,
    pub image_id: usize,
    pub class_id: usize,
    /// Highest location score among the pooled anchors.
    pub score: f64,
    /// Corners decoded from the highest-scoring anchor (px).
    pub corners: [[f64; 2]; 8],
    /// Anchors whose correspondences were pooled.
    pub anchors: usize,
    /// Correspondences agreeing with the RANSAC pose.
    pub inliers: usize,
    pub pose: Pose<f64>,
    /// ICP-refined pose when depth was available.
    pub refined_pose: Option<Pose<f64>>,
    pub time_ms: f64,
}

impl DetectionRecord {
    /// Refined pose when present, else the PnP pose.
    pub fn final_pose(&self) -> Pose<f64> {
        self.refined_pose.unwrap_or(self.pose)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageDetections {
    pub scene_id: usize,
    pub image_id: usize,
    pub records: Vec<DetectionRecord>,
    pub time_ms: f64,
}

/// Candidate anchors above threshold for one class.
struct Pool {
    best_score: f64,
    best_corners: [[f64; 2]; 8],
    anchors: usize,
    corrs: Vec<Correspondence<f64>>,
}

/// Forward pass and pose recovery for every class present in `image`.
///
/// All anchors of a class scoring above the threshold contribute their eight
/// decoded corners to one correspondence set, solved with RANSAC-PnP.
#[allow(clippy::too_many_arguments)]
pub fn infer_sample(
    net: &PoseNet<f32>,
    anchors: &[Anchor],
    meshes: &[Mesh],
    rgb: &RgbImage,
    depth: Option<&[f32]>,
    k: &Intrinsics<f64>,
    ids: (usize, usize),
    cfg: &InferConfig,
) -> Result<ImageDetections> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, rgb.to_tensor::<f32>())?;
    let ncls = net.num_classes();
    let a = net.anchors_per_location();
    let grids = level_grids(rgb.width, rgb.height, a);
    let mut pools: Vec<Option<Pool>> = (0..ncls).map(|_| None).collect();
    for (l, g) in grids.iter().enumerate() {
        let loc: &Tensor<f32> = tape.value(out.location[l]);
        let corr: &Tensor<f32> = tape.value(out.correspondence[l]);
        for y in 0..g.rows {
            for x in 0..g.cols {
                for ai in 0..a {
                    let idx = g.offset + (y * g.cols + x) * a + ai;
                    for c in 0..ncls {
                        let score = loc.at(0, ai * ncls + c, y, x) as f64;
                        if score <= cfg.score_threshold {
                            continue;
                        }
                        let Some(mesh) = meshes.iter().find(|m| m.class_id == c + 1) else {
                            continue;
                        };
                        let mut pred = [0.0; CORR_DIM];
                        for (j, p) in pred.iter_mut().enumerate() {
                            *p = corr.at(0, ai * CORR_DIM + j, y, x) as f64;
                        }
                        let corners = decode_correspondences(&pred, &anchors[idx]);
                        let pool = pools[c].get_or_insert_with(|| Pool {
                            best_score: f64::NEG_INFINITY,
                            best_corners: corners,
                            anchors: 0,
                            corrs: Vec::new(),
                        });
                        if score > pool.best_score {
                            pool.best_score = score;
                            pool.best_corners = corners;
                        }
                        pool.anchors += 1;
                        let box3 = mesh.bounding_box();
                        for (px, p3) in corners.iter().zip(box3.corners.iter()) {
                            pool.corrs.push(Correspondence::new(
                                Vector2::new(px[0], px[1]),
                                Vector3::new(p3[0], p3[1], p3[2]),
                            ));
                        }
                    }
                }
            }
        }
    }

    let mut records = Vec::new();
    for (c, pool) in pools.into_iter().enumerate() {
        let Some(pool) = pool else { continue };
        let Ok(fit) = ransac_pnp(&pool.corrs, k, &cfg.ransac) else {
            continue;
        };
        let mesh = meshes.iter().find(|m| m.class_id == c + 1).expect("pooled classes have meshes");
        let refined_pose = match (cfg.icp, depth) {
            (true, Some(d)) => {
                let gate = mask_gate(tape.value(out.mask), c, rgb.width, rgb.height, cfg.mask_threshold);
                refine_with_depth(mesh, &fit.pose, d, &gate, rgb.width, rgb.height, k, cfg)
            }
            _ => None,
        };
        records.push(DetectionRecord {
            scene_id: ids.0,
            image_id: ids.1,
            class_id: c + 1,
            score: pool.best_score,
            corners: pool.best_corners,
            anchors: pool.anchors,
            inliers: fit.inliers.len(),
            pose: fit.pose,
            refined_pose,
            time_ms: 0.0,
        });
    }
    let time_ms = start.elapsed().as_secs_f64() * 1e3;
    for r in &mut records {
        r.time_ms = time_ms;
    }
    Ok(ImageDetections {
        scene_id: ids.0,
        image_id: ids.1,
        records,
        time_ms,
    })
}

/// Full-resolution pixel mask of class `class` from the stride-8 mask map,
/// upsampled by nearest neighbour.
pub fn mask_gate(mask: &Tensor<f32>, class: usize, width: usize, height: usize, threshold: f64) -> Vec<bool> {
    let s = mask.shape();
    let (sx, sy) = (width / s.w, height / s.h);
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| mask.at(0, class, (y / sy).min(s.h - 1), (x / sx).min(s.w - 1)) as f64 > threshold)
        .collect()
}

/// Aligns the surface visible under `pose` to the masked depth points
/// around it.
///
/// The model cloud is the rendered visible surface, so self-occluded faces
/// do not pull the fit. Scene points must lie inside `gate`, near the
/// rendered silhouette and within the object's depth range. The result is
/// kept only when it lowers the trimmed residual.
#[allow(clippy::too_many_arguments)]
pub fn refine_with_depth(
    mesh: &Mesh,
    pose: &Pose<f64>,
    depth: &[f32],
    gate: &[bool],
    width: usize,
    height: usize,
    k: &Intrinsics<f64>,
    cfg: &InferConfig,
) -> Option<Pose<f64>> {
    let r = render(&[(mesh, *pose)], k, RgbImage::new(width, height));
    let inv = pose.inverse();
    let mut model = Vec::new();
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    let (mut zmin, mut zmax) = (f64::INFINITY, 0.0f64);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if r.index[i] != 0 {
                continue;
            }
            let z = r.depth[i] as f64;
            model.push(inv.transform(&k.backproject(x as f64, y as f64, z)));
            (x1, y1, x2, y2) = (x1.min(x), y1.min(y), x2.max(x), y2.max(y));
            (zmin, zmax) = (zmin.min(z), zmax.max(z));
        }
    }
    if model.len() < 10 {
        return None;
    }
    let margin = ((x2 - x1).max(y2 - y1) / 4).max(4);
    let (x1, y1) = (x1.saturating_sub(margin), y1.saturating_sub(margin));
    let (x2, y2) = ((x2 + margin).min(width - 1), (y2 + margin).min(height - 1));
    let slack = 0.5 * mesh.diameter;
    let mut scene = Vec::new();
    for y in y1..=y2 {
        for x in x1..=x2 {
            let d = depth[y * width + x] as f64;
            if gate[y * width + x] && d > 0.0 && d >= zmin - slack && d <= zmax + slack {
                scene.push(k.backproject(x as f64, y as f64, d));
            }
        }
    }
    if scene.len() < 10 {
        return None;
    }
    let model = strided(model, cfg.icp_points);
    let scene = strided(scene, cfg.icp_points.saturating_mul(4));
    let res = icp_refine(&model, &scene, pose, &cfg.icp_config);
    let (first, last) = (res.residuals.first()?, res.residuals.last()?);
    (res.iterations > 0 && last < first).then_some(res.pose)
}

fn strided<T: Copy>(v: Vec<T>, max: usize) -> Vec<T> {
    if max == 0 || v.len() <= max {
        return v;
    }
    (0..max).map(|i| v[i * v.len() / max]).collect()
}

/// Runs [`infer_sample`] over every image of `dataset`.
pub fn infer(net: &PoseNet<f32>, dataset: &Dataset, samples: &[SceneSample], cfg: &InferConfig) -> Result<Vec<ImageDetections>> {
    let Some((w, h)) = samples.first().map(|s| (s.width, s.height)) else {
        return Ok(Vec::new());
    };
    let anchors = generate_anchors(w, h, &net.config.anchors)?;
    samples
        .iter()
        .map(|s| {
            let anchors_here;
            let anchors = if (s.width, s.height) == (w, h) {
                &anchors
            } else {
                anchors_here = generate_anchors(s.width, s.height, &net.config.anchors)?;
                &anchors_here
            };
            infer_sample(
                net,
                anchors,
                &dataset.meshes,
                &s.rgb,
                s.depth.as_deref(),
                &s.intrinsics,
                (s.scene_id, s.image_id),
                cfg,
            )
        })
        .collect()
}
