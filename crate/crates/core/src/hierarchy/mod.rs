//! Manager, worker, subgoal selection, returns, and the entropy controller.

pub mod manager;
pub mod selector;
pub mod worker;

use crate::error::{Error, Result};

pub use manager::{
    manager_losses, manager_policy_loss, compose_subgoal, select_subgoals, AbstractBatch, ManagerConfig, ManagerEntropy,
    ManagerLossConfig, ManagerPolicy, ManagerReport, PolicyLossReport, Subgoal,
};
pub use selector::{GoalSelector, ManagerSelector, RandomSelector, SelectorRegistry};
pub use worker::{worker_losses, worker_rewards, WorkerAction, WorkerBatch, WorkerConfig, WorkerPolicy, WorkerReport};

/// `|a·b| / max(|a|, |b|)^2`, or 0 when both vectors are (near) zero.
pub fn cosine_max(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let m = na.max(nb);
    if m < 1e-8 {
        return 0.0;
    }
    (dot.abs() / (m * m)).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaReturnConfig {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LambdaReturnConfig {
    fn default() -> Self {
        LambdaReturnConfig {
            lambda: 0.95,
            gamma: 0.99,
        }
    }
}

impl LambdaReturnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= lambda <= 1 and 0 < gamma < 1, got lambda {} gamma {}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

/// `G_t = r_t + gamma ((1 - lambda) v_{t+1} + lambda G_{t+1})`, `G_H = v_H`,
/// where `r_t` is the reward received on the transition out of step `t`.
pub fn lambda_returns(rewards: &[f64], values: &[f64], config: &LambdaReturnConfig) -> Result<Vec<f64>> {
    lambda_returns_with_continues(rewards, values, &vec![1.0; rewards.len()], config)
}

/// Like [`lambda_returns`] but `continues[t] = 0` marks a terminal transition,
/// after which nothing is bootstrapped.
pub fn lambda_returns_with_continues(
    rewards: &[f64],
    values: &[f64],
    continues: &[f64],
    config: &LambdaReturnConfig,
) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 || continues.len() != rewards.len() {
        return Err(Error::Shape(format!(
            "lambda returns: {} rewards need {} values and continues, got {} and {}",
            rewards.len(),
            rewards.len() + 1,
            values.len(),
            continues.len()
        )));
    }
    let h = rewards.len();
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let g = rewards[t]
            + config.gamma * continues[t] * ((1.0 - config.lambda) * values[t + 1] + config.lambda * next);
        out[t] = g;
        next = g;
    }
    Ok(out)
}

/// Zero-mean values scaled by `1 / max(std, floor)`, over entries with a
/// positive weight; zero-weight entries come back as 0.
pub fn standardize(values: &[f64], weights: &[f64], floor: f64) -> Vec<f64> {
    let n: f64 = weights.iter().filter(|&&w| w > 0.0).count() as f64;
    if n == 0.0 {
        return vec![0.0; values.len()];
    }
    let mean = values
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(v, _)| v)
        .sum::<f64>()
        / n;
    let var = values
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(v, _)| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let scale = var.sqrt().max(floor);
    values
        .iter()
        .zip(weights)
        .map(|(v, &w)| if w > 0.0 { (v - mean) / scale } else { 0.0 })
        .collect()
}

/// Multiplicative controller holding a policy's entropy near
/// `target_fraction * H_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyController {
    pub coeff: f64,
    pub target_fraction: f64,
    pub rate: f64,
    pub min: f64,
    pub max: f64,
}

impl EntropyController {
    pub fn new(initial: f64, target_fraction: f64) -> Self {
        EntropyController {
            coeff: initial,
            target_fraction,
            rate: 0.01,
            min: 1e-5,
            max: 1.0,
        }
    }

    /// `coeff *= exp(rate (eta H_max - H) / H_max)`, clamped.
    pub fn update(&mut self, entropy: f64, max_entropy: f64) -> f64 {
        if max_entropy > 0.0 && entropy.is_finite() {
            let err = (self.target_fraction * max_entropy - entropy) / max_entropy;
            self.coeff = (self.coeff * (self.rate * err).exp()).clamp(self.min, self.max);
        }
        self.coeff
    }
}
