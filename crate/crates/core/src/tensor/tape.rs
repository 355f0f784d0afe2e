use super::kernels::{
    add, conv2d_backward_raw, conv2d_raw, down2, down2_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, up2, up2_backward,
};
use super::{ParamStore, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Up2(Var),
    Down2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    grad: Option<Vec<T>>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is built per forward pass and dropped after its gradients have
/// been written back into the [`ParamStore`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Convolutions skip the input gradient unless the
    /// tensor was created with [`Tensor::with_grad`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Records parameter `index` of `store` as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let src = store.by_index(index);
        let value = Tensor::from_vec(src.shape(), src.values().to_vec()).expect("same shape");
        self.push(value, Op::Param(index))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_raw(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn up2(&mut self, x: Var) -> Var {
        let out = up2(self.value(x));
        self.push(out, Op::Up2(x))
    }

    pub fn down2(&mut self, x: Var) -> Result<Var> {
        let out = down2(self.value(x))?;
        Ok(self.push(out, Op::Down2(x)))
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += *d),
            None => node.grad = Some(delta),
        }
    }

    /// Propagates the seeded output gradients back to every recorded leaf.
    pub fn backward(&mut self, seeds: Vec<(Var, Vec<T>)>) -> Result<()> {
        for (v, g) in seeds {
            let expect = self.value(v).len();
            if g.len() != expect {
                return Err(TensorError::BadLength {
                    got: g.len(),
                    shape: self.value(v).shape(),
                });
            }
            self.accumulate(v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let op = self.nodes[i].op;
            if matches!(op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(dout) = self.nodes[i].grad.take() else {
                continue;
            };
            match op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let need_input = match self.nodes[x.0].op {
                        Op::Input => self.nodes[x.0].value.requires_grad(),
                        _ => true,
                    };
                    let grads = conv2d_backward_raw(
                        self.value(x),
                        self.value(w),
                        stride,
                        pad,
                        &dout,
                        need_input,
                    )?;
                    if need_input {
                        self.accumulate(x, grads.input.into_values());
                    }
                    self.accumulate(w, grads.weight);
                    self.accumulate(b, grads.bias);
                }
                Op::Relu(x) => {
                    let dx = relu_backward(&self.nodes[i].value, &dout);
                    self.accumulate(x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = sigmoid_backward(&self.nodes[i].value, &dout);
                    self.accumulate(x, dx);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, dout.clone());
                    self.accumulate(b, dout);
                }
                Op::Up2(x) => {
                    let dx = up2_backward(self.value(x).shape(), &dout);
                    self.accumulate(x, dx);
                }
                Op::Down2(x) => {
                    let dx = down2_backward(self.value(x).shape(), &dout);
                    self.accumulate(x, dx);
                }
            }
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for node in &self.nodes {
            if let (Op::Param(index), Some(g)) = (node.op, node.grad.as_ref()) {
                store.accumulate(index, g)?;
            }
        }
        Ok(())
    }

    /// Gradient reaching an input leaf, used by gradient checks.
    pub fn input_grad(&self, v: Var) -> Option<&[T]> {
        match self.nodes[v.0].op {
            Op::Input => self.grad(v),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_param_accumulates_from_both_uses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let w = store.init("w", Shape::new(1, 1, 1, 1), Init::Constant(2.0), &mut rng);
        let b = store.init("b", Shape::new(1, 1, 1, 1), Init::Zeros, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(Shape::new(1, 1, 1, 1), 3.0));
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let y1 = tape.conv2d(x, wv, bv, 1, 0).unwrap();
        let y2 = tape.conv2d(y1, wv, bv, 1, 0).unwrap();
        assert_eq!(tape.value(y2).values(), &[12.0]);
        tape.backward(vec![(y2, vec![1.0])]).unwrap();
        tape.write_param_grads(&mut store).unwrap();
        // y2 = w*w*x  =>  dy2/dw = 2*w*x = 12
        assert_eq!(store.by_index(w).grad().unwrap(), &[12.0]);
        // dy2/db = w + 1 = 3
        assert_eq!(store.by_index(b).grad().unwrap(), &[3.0]);
    }
}
