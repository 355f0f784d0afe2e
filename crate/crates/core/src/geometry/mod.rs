//! Pinhole camera geometry, pose recovery and refinement. Lengths are in
//! millimetres, pixel centres sit at integer coordinates.

mod icp;
mod kdtree;
mod pnp;

pub use icp::{icp_refine, IcpConfig, IcpResult};
pub use kdtree::KdTree;
pub use pnp::{epnp, planar_pnp, ransac_pnp, refine_pose, Correspondence, RansacConfig, RansacResult};

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating point type usable by the geometry and metric code.
pub trait Real: nalgebra::RealField + Copy {}
impl<T: nalgebra::RealField + Copy> Real for T {}

pub(crate) fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point {index} has non-positive depth")]
    NonPositiveDepth { index: usize },
    #[error("{got} correspondences given, at least {need} needed")]
    TooFewCorrespondences { got: usize, need: usize },
    #[error("no pose: best consensus has {inliers} inliers, {need} needed")]
    NoPose { inliers: usize, need: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("depth image has {got} pixels, mask has {expected}")]
    SizeMismatch { got: usize, expected: usize },
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// From a row-major 3x3 camera matrix.
    pub fn from_matrix(k: &[T; 9]) -> Self {
        Self::new(k[0], k[4], k[2], k[5])
    }

    pub fn to_matrix(&self) -> [T; 9] {
        let (z, o) = (T::zero(), T::one());
        [self.fx, z, self.cx, z, self.fy, self.cy, z, z, o]
    }

    pub fn is_valid(&self) -> bool {
        self.fx > T::zero() && self.fy > T::zero()
    }

    /// Pixel of a camera-frame point; `None` when it lies behind the camera.
    pub fn project(&self, x: &Vector3<T>) -> Option<Vector2<T>> {
        if x.z <= T::zero() {
            return None;
        }
        Some(Vector2::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }

    /// Camera-frame point at depth `d` behind pixel `(u, v)`.
    pub fn backproject(&self, u: T, v: T, d: T) -> Vector3<T> {
        Vector3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }

}

/// Rigid model-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// From a row-major rotation and a translation.
    pub fn from_rows(r: &[T; 9], t: &[T; 3]) -> Self {
        Self::new(Matrix3::from_row_slice(r), Vector3::new(t[0], t[1], t[2]))
    }

    pub fn rotation_rows(&self) -> [T; 9] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[(i / 3, i % 3)])
    }

    /// Rotation about `axis_angle` (direction is the axis, norm the angle).
    pub fn from_axis_angle(axis_angle: Vector3<T>, translation: Vector3<T>) -> Self {
        Self::new(
            Rotation3::from_scaled_axis(axis_angle).into_inner(),
            translation,
        )
    }

    pub fn transform(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// Orthonormality and determinant within `tol`.
    pub fn is_valid(&self, tol: T) -> bool {
        let r = &self.rotation;
        let e = r.transpose() * r - Matrix3::identity();
        e.iter().all(|v| v.abs() <= tol) && (r.determinant() - T::one()).abs() <= tol
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_error(&self, other: &Pose<T>) -> T {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_error(&self, other: &Pose<T>) -> T {
        (self.translation - other.translation).norm()
    }

}

/// Rotation angle of a rotation matrix, stable near zero and pi.
pub fn rotation_angle<T: Real>(r: &Matrix3<T>) -> T {
    let two = lit::<T>(2.0);
    let cos = (r.trace() - T::one()) / two;
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = axis.norm() / two;
    sin.atan2(cos)
}

/// Nearest rotation in the Frobenius sense.
pub fn orthonormalize<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut r = u * vt;
    if r.determinant() < T::zero() {
        let k = smallest_index(&svd.singular_values);
        let mut u = u;
        u.column_mut(k).neg_mut();
        r = u * vt;
    }
    r
}

fn smallest_index<T: Real>(s: &Vector3<T>) -> usize {
    (0..3).fold(0, |best, i| if s[i] < s[best] { i } else { best })
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn kabsch<T: Real>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Result<Pose<T>> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(GeometryError::Degenerate("kabsch needs at least 3 paired points"));
    }
    let n = lit::<T>(src.len() as f64);
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (a - cs) * (b - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut v = vt.transpose();
    if (v * u.transpose()).determinant() < T::zero() {
        let k = smallest_index(&svd.singular_values);
        v.column_mut(k).neg_mut();
    }
    let r = v * u.transpose();
    Ok(Pose::new(r, cd - r * cs))
}

/// Pixels of model points under `pose`.
pub fn project<T: Real>(points: &[Vector3<T>], pose: &Pose<T>, k: &Intrinsics<T>) -> Result<Vec<Vector2<T>>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let x = pose.transform(p);
            k.project(&x).ok_or(GeometryError::NonPositiveDepth { index })
        })
        .collect()
}

/// Camera-frame points of masked pixels with positive depth, row-major.
pub fn backproject<T: Real>(
    depth: &[T],
    mask: &[bool],
    width: usize,
    k: &Intrinsics<T>,
) -> Result<Vec<Vector3<T>>> {
    if depth.len() != mask.len() {
        return Err(GeometryError::SizeMismatch {
            got: depth.len(),
            expected: mask.len(),
        });
    }
    let mut out = Vec::new();
    for (i, (&d, &m)) in depth.iter().zip(mask).enumerate() {
        if m && d > T::zero() {
            let (u, v) = (i % width, i / width);
            out.push(k.backproject(lit(u as f64), lit(v as f64), d));
        }
    }
    Ok(out)
}

pub type Pose64 = Pose<f64>;
pub type Intrinsics64 = Intrinsics<f64>;
