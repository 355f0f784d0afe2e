use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::infer::{infer, ImageDetections};
use super::{create_parent, Dataset, InferConfig, PipelineError, Result};
use crate::metrics::{evaluate, EvalConfig, EvalReport, GroundTruthPose, PoseEstimate, ScoringModel};
use crate::network::PoseNet;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub detections: Vec<ImageDetections>,
}

/// Image index used by the metrics: scene and image id packed together.
fn image_key(scene_id: usize, image_id: usize) -> usize {
    scene_id * 1_000_000 + image_id
}

/// Scores detections against the dataset's ground truth.
pub fn score_detections(detections: &[ImageDetections], dataset: &Dataset, cfg: &EvalConfig) -> EvalReport {
    let mut eval_cfg = cfg.clone();
    for m in dataset.meshes.iter().filter(|m| m.symmetric) {
        if !eval_cfg.symmetric_classes.contains(&m.class_id) {
            eval_cfg.symmetric_classes.push(m.class_id);
        }
    }
    let models: BTreeMap<usize, ScoringModel> = dataset
        .meshes
        .iter()
        .map(|m| (m.class_id, ScoringModel::new(m.name(), &m.vertices)))
        .collect();
    let estimates: Vec<PoseEstimate> = detections
        .iter()
        .flat_map(|d| d.records.iter())
        .map(|r| PoseEstimate {
            image: image_key(r.scene_id, r.image_id),
            class_id: r.class_id,
            score: r.score,
            pose: r.final_pose(),
        })
        .collect();
    let gts: Vec<GroundTruthPose> = dataset
        .samples
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(move |o| GroundTruthPose {
                image: image_key(s.scene_id, s.image_id),
                class_id: o.class_id,
                pose: o.pose,
            })
        })
        .collect();
    evaluate(&estimates, &gts, &models, &eval_cfg)
}

/// Inference over the whole dataset followed by scoring.
pub fn evaluate_dataset(net: &PoseNet<f32>, dataset: &Dataset, infer_cfg: &InferConfig, eval_cfg: &EvalConfig) -> Result<EvalOutcome> {
    let detections = infer(net, dataset, &dataset.samples, infer_cfg)?;
    let report = score_detections(&detections, dataset, eval_cfg);
    Ok(EvalOutcome { report, detections })
}

/// BOP result rows: `scene_id,im_id,obj_id,score,R,t,time` with `R` as nine
/// space-separated row-major values and `t` in millimetres.
pub fn bop_results_csv(detections: &[ImageDetections]) -> String {
    let mut out = String::from("scene_id,im_id,obj_id,score,R,t,time\n");
    for d in detections {
        for r in &d.records {
            let p = r.final_pose();
            let rot: Vec<String> = p.rotation_rows().iter().map(|v| v.to_string()).collect();
            let t = p.translation;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{} {} {},{}",
                r.scene_id,
                r.image_id,
                r.class_id,
                r.score,
                rot.join(" "),
                t.x,
                t.y,
                t.z,
                d.time_ms / 1e3
            );
        }
    }
    out
}

pub fn write_bop_results(path: &Path, detections: &[ImageDetections]) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, bop_results_csv(detections)).map_err(|e| PipelineError::io(path, e))
}

/// Writes `results.csv`, `report.txt`, `report.json` and `detections.json`.
pub fn write_outputs(dir: &Path, outcome: &EvalOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    write_bop_results(&dir.join("results.csv"), &outcome.detections)?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| PipelineError::io(&p, e))
    };
    write("report.txt", outcome.report.to_text())?;
    write("report.json", outcome.report.to_json())?;
    write(
        "detections.json",
        serde_json::to_string_pretty(&outcome.detections).expect("detections serialise"),
    )
}
