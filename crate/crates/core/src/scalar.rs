//! Scalar abstraction for the tensor engine.
//!
//! Training runs in `f32`; gradient checks run the identical code path in
//! `f64`. Everything numeric in [`crate::tensor`], [`crate::network`] and
//! [`crate::loss`] is written against [`Scalar`].

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type tag stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

macro_rules! check_extent {
    ($buf:expr, $rows:expr, $cols:expr, $rs:expr, $cs:expr) => {
        if $rows > 0 && $cols > 0 {
            let last = ($rows as isize - 1) * $rs + ($cols as isize - 1) * $cs;
            assert!(
                last >= 0 && (last as usize) < $buf.len(),
                "gemm operand out of bounds"
            );
        }
    };
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_extent!(a, m, k, rsa, csa);
        check_extent!(b, k, n, rsb, csb);
        check_extent!(c, m, n, rsc, csc);
        // SAFETY: all operand extents were bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_extent!(a, m, k, rsa, csa);
        check_extent!(b, k, n, rsb, csb);
        check_extent!(c, m, n, rsc, csc);
        // SAFETY: all operand extents were bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn le_roundtrip() {
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        (-3.5f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.25);
        assert_eq!(f64::read_le(&buf[4..]), -3.5);
    }
}
