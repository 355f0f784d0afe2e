//! Box priors on the pyramid grids, IoU assignment, and the normalised
//! 16-value bounding-box-corner correspondence encoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("image extent {0} is not divisible by 32")]
    Indivisible(usize),
    #[error("anchor list is empty")]
    NoAnchors,
    #[error("anchor spec needs at least one scale and one ratio")]
    EmptySpec,
}

/// Pyramid level an anchor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    P3,
    P4,
    P5,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::P3, Level::P4, Level::P5];

    pub const fn stride(self) -> usize {
        match self {
            Level::P3 => 8,
            Level::P4 => 16,
            Level::P5 => 32,
        }
    }

    pub const fn index(self) -> usize {
        match self {
            Level::P3 => 0,
            Level::P4 => 1,
            Level::P5 => 2,
        }
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Tight bounds of a point set.
    pub fn enclosing(points: &[[f64; 2]]) -> Option<Self> {
        let first = points.first()?;
        let mut b = BBox::new(first[0], first[1], first[0], first[1]);
        for p in &points[1..] {
            b.x1 = b.x1.min(p[0]);
            b.y1 = b.y1.min(p[1]);
            b.x2 = b.x2.max(p[0]);
            b.y2 = b.y2.max(p[1]);
        }
        Some(b)
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: Level,
}

impl Anchor {
    pub fn width(&self) -> f64 {
        self.bbox.width()
    }

    pub fn height(&self) -> f64 {
        self.bbox.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.bbox.x1 + self.bbox.x2),
            0.5 * (self.bbox.y1 + self.bbox.y2),
        ]
    }
}

/// Prior sizes per level plus the scale/ratio grid applied at every location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorSpec {
    /// Side length at scale 1 and ratio 1 for P3, P4, P5.
    pub base_sizes: [f64; 3],
    pub scales: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            base_sizes: [32.0, 64.0, 128.0],
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorSpec {
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// `(width, height)` of every prior at one location, scale-major.
    fn shapes(&self, level: Level) -> Vec<(f64, f64)> {
        let base = self.base_sizes[level.index()];
        let mut out = Vec::with_capacity(self.per_location());
        for &s in &self.scales {
            for &r in &self.ratios {
                let side = base * s;
                out.push((side / r.sqrt(), side * r.sqrt()));
            }
        }
        out
    }
}

/// Grid of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGrid {
    pub level: Level,
    pub rows: usize,
    pub cols: usize,
    /// Index of this level's first anchor in the flat list.
    pub offset: usize,
}

pub fn level_grids(width: usize, height: usize, per_location: usize) -> [LevelGrid; 3] {
    let mut offset = 0;
    Level::ALL.map(|level| {
        let s = level.stride();
        let g = LevelGrid {
            level,
            rows: height / s,
            cols: width / s,
            offset,
        };
        offset += g.rows * g.cols * per_location;
        g
    })
}

/// Priors for a `width x height` image.
///
/// Ordering is level-major, then row-major grid location, then
/// `(scale, ratio)`. Centres sit at `(col + 0.5) * stride`.
pub fn generate_anchors(
    width: usize,
    height: usize,
    spec: &AnchorSpec,
) -> Result<Vec<Anchor>, AnchorError> {
    for e in [width, height] {
        if e == 0 || e % 32 != 0 {
            return Err(AnchorError::Indivisible(e));
        }
    }
    if spec.per_location() == 0 {
        return Err(AnchorError::EmptySpec);
    }
    let mut out = Vec::new();
    for grid in level_grids(width, height, spec.per_location()) {
        let stride = grid.level.stride() as f64;
        let shapes = spec.shapes(grid.level);
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let cx = (col as f64 + 0.5) * stride;
                let cy = (row as f64 + 0.5) * stride;
                for &(w, h) in &shapes {
                    out.push(Anchor {
                        bbox: BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h),
                        level: grid.level,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Number of bounding-box corners carried per correspondence hypothesis.
pub const NUM_CORNERS: usize = 8;
/// Regression values per anchor.
pub const CORR_DIM: usize = 2 * NUM_CORNERS;

/// The 12 edges of a box in canonical corner order: pairs whose indices
/// differ in exactly one bit.
pub const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// 3D bounding box corners in the model frame (mm).
///
/// Corner `k` takes the max extent on x when bit 0 is set, on y for bit 1
/// and on z for bit 2, the min extent otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub corners: [[f64; 3]; 8],
}

impl Box3D {
    pub fn from_extents(min: [f64; 3], max: [f64; 3]) -> Self {
        let mut corners = [[0.0; 3]; 8];
        for (k, c) in corners.iter_mut().enumerate() {
            for axis in 0..3 {
                c[axis] = if k >> axis & 1 == 1 {
                    max[axis]
                } else {
                    min[axis]
                };
            }
        }
        Self { corners }
    }

    pub fn from_points(points: &[[f64; 3]]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Self::from_extents(min, max)
    }
}

/// One annotated object for assignment: class id is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
    pub corners: [[f64; 2]; 8],
}

/// Per-anchor labels and regression targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    /// 0 for background, otherwise the 1-based class id.
    pub labels: Vec<usize>,
    /// Index of the matched ground truth for positives.
    pub matched: Vec<Option<usize>>,
    /// Encoded corners, meaningful for positives only.
    pub targets: Vec<[f64; CORR_DIM]>,
    pub positives: Vec<usize>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

/// IoU strictly above this marks an anchor as a true location.
pub const POSITIVE_IOU: f64 = 0.5;

/// Labels every anchor. Positives need IoU above 0.5 with some ground truth
/// and take the one of maximal IoU (lowest index on ties); every other anchor
/// is background.
pub fn assign_targets(
    anchors: &[Anchor],
    gt: &[GroundTruth],
) -> Result<TargetAssignment, AnchorError> {
    if anchors.is_empty() {
        return Err(AnchorError::NoAnchors);
    }
    let n = anchors.len();
    let mut out = TargetAssignment {
        labels: vec![0; n],
        matched: vec![None; n],
        targets: vec![[0.0; CORR_DIM]; n],
        positives: Vec::new(),
    };
    for (i, anchor) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            let v = iou(&anchor.bbox, &g.bbox);
            if v > POSITIVE_IOU && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            out.labels[i] = gt[j].class_id;
            out.matched[i] = Some(j);
            out.targets[i] = encode_correspondences(&gt[j].corners, anchor);
            out.positives.push(i);
        }
    }
    Ok(out)
}

/// Corner offsets from the anchor's top-left, in units of anchor width/height.
pub fn encode_correspondences(corners: &[[f64; 2]; 8], anchor: &Anchor) -> [f64; CORR_DIM] {
    let (w, h) = (anchor.width(), anchor.height());
    let mut out = [0.0; CORR_DIM];
    for (k, c) in corners.iter().enumerate() {
        out[2 * k] = (c[0] - anchor.bbox.x1) / w;
        out[2 * k + 1] = (c[1] - anchor.bbox.y1) / h;
    }
    out
}

pub fn decode_correspondences(pred: &[f64; CORR_DIM], anchor: &Anchor) -> [[f64; 2]; 8] {
    let (w, h) = (anchor.width(), anchor.height());
    let mut out = [[0.0; 2]; 8];
    for (k, c) in out.iter_mut().enumerate() {
        c[0] = anchor.bbox.x1 + pred[2 * k] * w;
        c[1] = anchor.bbox.y1 + pred[2 * k + 1] * h;
    }
    out
}
