//! ADD and ADD-S pose errors, model diameter and recall reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{lit, KdTree, Pose, Real};

/// Largest number of model points used for scoring.
pub const MAX_SCORING_POINTS: usize = 2000;

/// Mean distance between corresponding model points under the two poses.
pub fn add_score<T: Real>(points: &[Vector3<T>], est: &Pose<T>, gt: &Pose<T>) -> T {
    if points.is_empty() {
        return T::zero();
    }
    let sum = points
        .iter()
        .fold(T::zero(), |acc, p| acc + (est.transform(p) - gt.transform(p)).norm());
    sum / lit(points.len() as f64)
}

/// Mean distance from each ground-truth-posed point to the closest
/// estimate-posed point.
pub fn adds_score<T: Real>(points: &[Vector3<T>], est: &Pose<T>, gt: &Pose<T>) -> T {
    if points.is_empty() {
        return T::zero();
    }
    let tree = KdTree::new(points.iter().map(|p| est.transform(p)).collect());
    let sum = points.iter().fold(T::zero(), |acc, p| {
        let (_, d2) = tree.nearest(&gt.transform(p)).expect("non-empty");
        acc + d2.sqrt()
    });
    sum / lit(points.len() as f64)
}

/// Exact largest pairwise distance.
pub fn model_diameter<T: Real>(points: &[Vector3<T>]) -> T {
    let mut best = T::zero();
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

/// Evenly strided subset of at most `max` points, first point included.
pub fn subsample<T: Real>(points: &[Vector3<T>], max: usize) -> Vec<Vector3<T>> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    (0..max).map(|i| points[i * points.len() / max]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// A pose is correct when its error is below this share of the diameter.
    pub threshold_fraction: f64,
    /// Classes scored with ADD-S.
    pub symmetric_classes: Vec<usize>,
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.10,
            symmetric_classes: Vec::new(),
            score_threshold: 0.5,
        }
    }
}

/// Model data needed for scoring one class.
#[derive(Debug, Clone)]
pub struct ScoringModel {
    pub name: String,
    pub points: Vec<Vector3<f64>>,
    pub diameter: f64,
}

impl ScoringModel {
    pub fn new(name: impl Into<String>, vertices: &[Vector3<f64>]) -> Self {
        Self {
            name: name.into(),
            diameter: model_diameter(vertices),
            points: subsample(vertices, MAX_SCORING_POINTS),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub image: usize,
    pub class_id: usize,
    pub score: f64,
    pub pose: Pose<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPose {
    pub image: usize,
    pub class_id: usize,
    pub pose: Pose<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub image: usize,
    pub class_id: usize,
    pub score: Option<f64>,
    /// ADD or ADD-S in millimetres, absent when nothing was detected.
    pub error: Option<f64>,
    pub threshold: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRecall {
    pub class_id: usize,
    pub name: String,
    pub symmetric: bool,
    pub total: usize,
    pub correct: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassRecall>,
    /// Unweighted mean over classes.
    pub mean_recall: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn recall_of(&self, class_id: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.class_id == class_id).map(|c| c.recall)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:<16} {:<6} {:>7} {:>7} {:>8}", "class", "object", "metric", "correct", "total", "recall");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<8} {:<16} {:<6} {:>7} {:>7} {:>7.2}%",
                c.class_id,
                c.name,
                if c.symmetric { "ADD-S" } else { "ADD" },
                c.correct,
                c.total,
                100.0 * c.recall
            );
        }
        let _ = writeln!(out, "{:<8} {:<16} {:<6} {:>7} {:>7} {:>7.2}%", "avg", "", "", "", "", 100.0 * self.mean_recall);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Scores every ground-truth object against the highest-scoring estimate of
/// its class in the same image.
pub fn evaluate(
    estimates: &[PoseEstimate],
    ground_truth: &[GroundTruthPose],
    models: &BTreeMap<usize, ScoringModel>,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut best: BTreeMap<(usize, usize), &PoseEstimate> = BTreeMap::new();
    for e in estimates.iter().filter(|e| e.score > cfg.score_threshold) {
        let slot = best.entry((e.image, e.class_id)).or_insert(e);
        // Ties fall back to a total order on the pose so input order is irrelevant.
        let key = |x: &PoseEstimate| (x.score, x.pose.translation.x, x.pose.translation.y, x.pose.translation.z);
        if key(e).partial_cmp(&key(slot)) == Some(std::cmp::Ordering::Greater) {
            *slot = e;
        }
    }
    let mut records = Vec::with_capacity(ground_truth.len());
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for g in ground_truth {
        let symmetric = cfg.symmetric_classes.contains(&g.class_id);
        let model = models.get(&g.class_id);
        let threshold = model.map_or(0.0, |m| cfg.threshold_fraction * m.diameter);
        let hit = best.get(&(g.image, g.class_id));
        let error = match (hit, model) {
            (Some(e), Some(m)) => Some(if symmetric {
                adds_score(&m.points, &e.pose, &g.pose)
            } else {
                add_score(&m.points, &e.pose, &g.pose)
            }),
            _ => None,
        };
        let correct = error.is_some_and(|d| d < threshold);
        let entry = per_class.entry(g.class_id).or_default();
        entry.0 += 1;
        entry.1 += correct as usize;
        records.push(EvalRecord {
            image: g.image,
            class_id: g.class_id,
            score: hit.map(|e| e.score),
            error,
            threshold,
            correct,
        });
    }
    let classes: Vec<ClassRecall> = per_class
        .into_iter()
        .map(|(class_id, (total, correct))| ClassRecall {
            class_id,
            name: models.get(&class_id).map_or_else(|| format!("obj_{class_id:06}"), |m| m.name.clone()),
            symmetric: cfg.symmetric_classes.contains(&class_id),
            total,
            correct,
            recall: correct as f64 / total as f64,
        })
        .collect();
    let mean_recall = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.recall).sum::<f64>() / classes.len() as f64
    };
    EvalReport {
        classes,
        mean_recall,
        records,
    }
}
