use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.len()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            state: AdamState {
                first: zeros(),
                second: zeros(),
                step: 0,
            },
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected Adam update. Gradients are left in place; the
    /// caller zeroes them before the next accumulation.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.state.first.len() != params.len() {
            return Err(TensorError::Checkpoint(format!(
                "optimizer tracks {} tensors, store has {}",
                self.state.first.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter() {
            if p.grad().is_none() {
                return Err(TensorError::MissingGradient(name.to_string()));
            }
        }
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = T::lit(c.learning_rate / bc1);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.epsilon);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            let grad = p.grad().expect("checked above").to_vec();
            for (j, value) in p.values_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                *value -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
