use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Result, Shape, Tensor, TensorError};
use crate::scalar::Scalar;

/// Parameter initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`.
    HeNormal,
    Normal { std: f64 },
    Constant(f64),
    Zeros,
}

/// Named trainable tensors in insertion order.
///
/// Names are hierarchical, dot-separated (`pyramid.t4.weight`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let (index, _) = self.params.insert_full(name.into(), tensor.with_grad());
        index
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        init: Init,
        rng: &mut impl Rng,
    ) -> usize {
        let fan_in = shape.c * shape.h * shape.w;
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::filled(shape, T::lit(v)),
            Init::HeNormal => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                sample_normal(shape, std, rng)
            }
            Init::Normal { std } => sample_normal(shape, std, rng),
        };
        self.insert(name, tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn by_index(&self, index: usize) -> &Tensor<T> {
        &self.params[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.params[index]
    }

    pub fn name(&self, index: usize) -> &str {
        self.params.get_index(index).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, index: usize, delta: &[T]) -> Result<()> {
        self.params[index].accumulate_grad(delta)
    }

    /// Replaces values from another store, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Checkpoint(format!(
                "parameter count {} does not match model ({})",
                other.len(),
                self.len()
            )));
        }
        for (name, dst) in self.params.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            if src.shape() != dst.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "`{name}` has shape {} but model expects {}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }
}

fn sample_normal<T: Scalar>(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std.max(0.0)).expect("non-negative std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_normal_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let i = store.init("w", Shape::new(64, 32, 3, 3), Init::HeNormal, &mut rng);
        let v = store.by_index(i).values();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let want = 2.0 / (32.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
        assert!(store.by_index(i).grad().is_some());
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::<f32>::new();
        a.init("w", Shape::new(1, 1, 3, 3), Init::HeNormal, &mut rng);
        let mut b = ParamStore::<f32>::new();
        b.init("w", Shape::new(1, 1, 1, 1), Init::Zeros, &mut rng);
        assert!(a.load_from(&b).is_err());
        let c = a.clone();
        a.by_index_mut(0).values_mut()[0] = 42.0;
        a.load_from(&c).unwrap();
        assert_eq!(a.by_index(0).values(), c.by_index(0).values());
    }
}
