//! Dense NCHW tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is plain storage. Differentiable computation is recorded on a
//! [`Tape`]; parameters live in a [`ParamStore`] and are updated by [`Adam`].

mod adam;
mod checkpoint;
mod kernels;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use kernels::{
    add, add_backward, conv2d, conv2d_backward, down2, down2_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, up2, up2_backward, ConvGrads, ConvParams,
};
pub use params::{Init, ParamStore};
pub use tape::{Tape, Var};

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch on {axis} axis: {left} vs {right} ({context})")]
    ShapeMismatch {
        axis: &'static str,
        left: usize,
        right: usize,
        context: &'static str,
    },
    #[error("{axis} extent {extent} does not divide exactly ({context})")]
    Indivisible {
        axis: &'static str,
        extent: usize,
        context: &'static str,
    },
    #[error("buffer of length {got} does not fit shape {shape}")]
    BadLength { got: usize, shape: Shape },
    #[error("parameter `{0}` has no gradient buffer")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Batch, channel, height and width extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub(crate) fn expect_same(&self, other: &Shape, context: &'static str) -> Result<()> {
        let pairs = [
            ("batch", self.n, other.n),
            ("channel", self.c, other.c),
            ("height", self.h, other.h),
            ("width", self.w, other.w),
        ];
        for (axis, left, right) in pairs {
            if left != right {
                return Err(TensorError::ShapeMismatch {
                    axis,
                    left,
                    right,
                    context,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            values: vec![T::zero(); shape.len()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            values: vec![value; shape.len()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: Shape, values: Vec<T>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(TensorError::BadLength {
                got: values.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape,
            values: (0..shape.len()).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.values.len()]);
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it when absent.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(TensorError::BadLength {
                got: delta.len(),
                shape: self.shape,
            });
        }
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in g.iter_mut().zip(delta) {
            *g += *d;
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.values[self.index(n, c, y, x)]
    }

    /// Copy of batch item `n` as a `1 x C x H x W` tensor.
    pub fn item(&self, n: usize) -> Tensor<T> {
        let len = self.shape.item();
        let start = n * len;
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            values: self.values[start..start + len].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
            grad: None,
            requires_grad: false,
        }
    }
}
