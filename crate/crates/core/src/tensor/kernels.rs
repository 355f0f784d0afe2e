//! Forward and backward kernels for the differentiable operations.

use super::{Result, Shape, Tensor, TensorError};
use crate::scalar::Scalar;

/// Convolution weights, bias and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `out_ch x in_ch x kh x kw`
    pub weight: Tensor<T>,
    /// `1 x out_ch x 1 x 1`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent `(extent + 2 pad - kernel) / stride + 1`; strided
/// convolutions also need `extent` divisible by `stride`.
fn out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    axis: &'static str,
) -> Result<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || padded < kernel || !extent.is_multiple_of(stride) {
        return Err(TensorError::Indivisible {
            axis,
            extent,
            context: "conv2d output extent",
        });
    }
    Ok((padded - kernel) / stride + 1)
}

fn conv_geom(x: Shape, w: Shape, bias: Shape, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.c != w.c {
        return Err(TensorError::ShapeMismatch {
            axis: "channel",
            left: x.c,
            right: w.c,
            context: "conv2d input vs weight in_ch",
        });
    }
    if bias.len() != w.n {
        return Err(TensorError::ShapeMismatch {
            axis: "channel",
            left: bias.len(),
            right: w.n,
            context: "conv2d bias vs weight out_ch",
        });
    }
    let oh = out_extent(x.h, w.h, stride, pad, "height")?;
    let ow = out_extent(x.w, w.w, stride, pad, "width")?;
    Ok(ConvGeom {
        cin: x.c,
        h: x.h,
        w: x.w,
        kh: w.h,
        kw: w.w,
        stride,
        pad,
        oh,
        ow,
    })
}

fn im2col<T: Scalar>(src: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_cols = g.cols();
    for ci in 0..g.cin {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dst: &mut [T]) {
    let n_cols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let g = conv_geom(xs, ws, bias.shape(), stride, pad)?;
    let cout = ws.n;
    let out_shape = Shape::new(xs.n, cout, g.oh, g.ow);
    let mut out = Tensor::zeros(out_shape);
    let (rows, n_cols) = (g.rows(), g.cols());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n_cols]
    };
    let b = bias.values();
    for n in 0..xs.n {
        let src = &x.values()[n * xs.item()..(n + 1) * xs.item()];
        let dst = &mut out.values_mut()[n * out_shape.item()..(n + 1) * out_shape.item()];
        for (co, plane) in dst.chunks_mut(n_cols).enumerate() {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        let operand: &[T] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut cols);
            &cols
        };
        T::gemm(
            cout,
            rows,
            n_cols,
            T::one(),
            weight.values(),
            rows as isize,
            1,
            operand,
            n_cols as isize,
            1,
            T::one(),
            dst,
            n_cols as isize,
            1,
        );
    }
    Ok(out)
}

pub(crate) fn conv2d_backward_raw<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &[T],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let bias_shape = Shape::new(1, ws.n, 1, 1);
    let g = conv_geom(xs, ws, bias_shape, stride, pad)?;
    let cout = ws.n;
    let (rows, n_cols) = (g.rows(), g.cols());
    let out_item = cout * n_cols;
    if dout.len() != xs.n * out_item {
        return Err(TensorError::BadLength {
            got: dout.len(),
            shape: Shape::new(xs.n, cout, g.oh, g.ow),
        });
    }
    let mut dw = vec![T::zero(); ws.len()];
    let mut db = vec![T::zero(); cout];
    let mut dx = Tensor::zeros(if need_input { xs } else { Shape::new(0, 0, 0, 0) });
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n_cols]
    };
    let mut dcols = if need_input && !g.is_pointwise() {
        vec![T::zero(); rows * n_cols]
    } else {
        Vec::new()
    };
    for n in 0..xs.n {
        let src = &x.values()[n * xs.item()..(n + 1) * xs.item()];
        let d = &dout[n * out_item..(n + 1) * out_item];
        for (co, plane) in d.chunks(n_cols).enumerate() {
            db[co] += plane.iter().copied().sum::<T>();
        }
        let operand: &[T] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut cols);
            &cols
        };
        // dW += dOut * cols^T
        T::gemm(
            cout,
            n_cols,
            rows,
            T::one(),
            d,
            n_cols as isize,
            1,
            operand,
            1,
            n_cols as isize,
            T::one(),
            &mut dw,
            rows as isize,
            1,
        );
        if need_input {
            let dst = &mut dx.values_mut()[n * xs.item()..(n + 1) * xs.item()];
            if g.is_pointwise() {
                // dX = W^T * dOut, written in place
                T::gemm(
                    rows,
                    cout,
                    n_cols,
                    T::one(),
                    weight.values(),
                    1,
                    rows as isize,
                    d,
                    n_cols as isize,
                    1,
                    T::zero(),
                    dst,
                    n_cols as isize,
                    1,
                );
            } else {
                T::gemm(
                    rows,
                    cout,
                    n_cols,
                    T::one(),
                    weight.values(),
                    1,
                    rows as isize,
                    d,
                    n_cols as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    n_cols as isize,
                    1,
                );
                col2im(&dcols, &g, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// 2D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_raw(x, &p.weight, &p.bias, p.stride, p.padding)
}

/// Gradients of `sum(dout * conv2d(x, p))` w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    dout: &[T],
) -> Result<ConvGrads<T>> {
    conv2d_backward_raw(x, &p.weight, p.stride, p.padding, dout, true)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at zero is zero. `out` is the forward result.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, dout: &[T]) -> Vec<T> {
    out.values()
        .iter()
        .zip(dout)
        .map(|(&o, &d)| if o > T::zero() { d } else { T::zero() })
        .collect()
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, dout: &[T]) -> Vec<T> {
    out.values()
        .iter()
        .zip(dout)
        .map(|(&s, &d)| d * s * (T::one() - s))
        .collect()
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.shape().expect_same(&b.shape(), "add")?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), values)
}

pub fn add_backward<T: Scalar>(dout: &[T]) -> (Vec<T>, Vec<T>) {
    (dout.to_vec(), dout.to_vec())
}

/// Nearest-neighbour upsampling by two.
pub fn up2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let src = x.values();
    let mut out = Vec::with_capacity(os.len());
    for plane in src.chunks(s.plane().max(1)).take(s.n * s.c) {
        for oy in 0..os.h {
            let row = &plane[(oy / 2) * s.w..(oy / 2 + 1) * s.w];
            for ox in 0..os.w {
                out.push(row[ox / 2]);
            }
        }
    }
    Tensor::from_vec(os, out).expect("upsampled length")
}

pub fn up2_backward<T: Scalar>(input_shape: Shape, dout: &[T]) -> Vec<T> {
    let s = input_shape;
    let (oh, ow) = (s.h * 2, s.w * 2);
    let mut dx = vec![T::zero(); s.len()];
    for p in 0..s.n * s.c {
        let d = &dout[p * oh * ow..(p + 1) * oh * ow];
        let g = &mut dx[p * s.plane()..(p + 1) * s.plane()];
        for oy in 0..oh {
            for ox in 0..ow {
                g[(oy / 2) * s.w + ox / 2] += d[oy * ow + ox];
            }
        }
    }
    dx
}

/// Stride-two nearest subsampling; requires even spatial extents.
pub fn down2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) {
        return Err(TensorError::Indivisible {
            axis: "height",
            extent: s.h,
            context: "down2 needs even extents",
        });
    }
    if !s.w.is_multiple_of(2) {
        return Err(TensorError::Indivisible {
            axis: "width",
            extent: s.w,
            context: "down2 needs even extents",
        });
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.len());
    for plane in x.values().chunks(s.plane().max(1)).take(s.n * s.c) {
        for oy in 0..os.h {
            for ox in 0..os.w {
                out.push(plane[(2 * oy) * s.w + 2 * ox]);
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn down2_backward<T: Scalar>(input_shape: Shape, dout: &[T]) -> Vec<T> {
    let s = input_shape;
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut dx = vec![T::zero(); s.len()];
    for p in 0..s.n * s.c {
        let d = &dout[p * oh * ow..(p + 1) * oh * ow];
        let g = &mut dx[p * s.plane()..(p + 1) * s.plane()];
        for oy in 0..oh {
            for ox in 0..ow {
                g[(2 * oy) * s.w + 2 * ox] += d[oy * ow + ox];
            }
        }
    }
    dx
}
