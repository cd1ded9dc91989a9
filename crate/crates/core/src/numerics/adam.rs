//! Adam with decoupled weight decay and a global-norm gradient clip.

use log::warn;

use super::matrix::Matrix;
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before the update; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 1e-2,
            clip_norm: Some(100.0),
        }
    }
}

/// Moment accumulators for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(set: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || {
            set.tensors()
                .iter()
                .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
                .collect()
        };
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// Applies one update from the gradients currently held in `set`.
    ///
    /// Non-finite gradients reject the step: weights, moments, and the step
    /// counter are left untouched.
    pub fn step(&mut self, set: &mut ParamSet) -> Result<()> {
        if self.first.len() != set.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.first.len(),
                set.len()
            )));
        }
        if !set.grads_finite() {
            warn!("rejecting optimizer step {}: non-finite gradient", self.step + 1);
            return Err(Error::NonFinite("gradient".into()));
        }
        let c = self.config;
        let mut clip = 1.0;
        if let Some(max_norm) = c.clip_norm {
            let norm = set.grad_norm();
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((tensor, m), v) in set
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            assert_eq!(tensor.shape(), m.shape(), "moment shape mismatch");
            let w = tensor.value.data_mut();
            let g = tensor.grad.data();
            for i in 0..w.len() {
                let gi = g[i] * clip;
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let vhat = *vi / bc2;
                w[i] -= c.learning_rate * (mhat / (vhat.sqrt() + c.epsilon) + c.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}
