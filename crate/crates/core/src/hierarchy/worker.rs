//! Goal-conditioned worker: a tanh-squashed Gaussian actor and a critic,
//! trained with lambda-returns on the `cosine_max` goal reward.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{cosine_max, lambda_returns_with_continues, standardize, LambdaReturnConfig};
use crate::error::{Error, Result};
use crate::numerics::mlp::{Init, Mlp, MlpSpec};
use crate::numerics::tape::sigmoid;
use crate::numerics::{Matrix, ParamSet, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub layers: usize,
    pub units: usize,
    pub std_min: f64,
    pub std_max: f64,
}

impl WorkerConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        WorkerConfig {
            state_dim,
            action_dim,
            layers: 4,
            units: 512,
            std_min: 0.1,
            std_max: 1.0,
        }
    }

    /// Entropy of the widest policy measured relative to the narrowest.
    pub fn max_entropy(&self) -> f64 {
        self.action_dim as f64 * (self.std_max / self.std_min).ln()
    }
}

#[derive(Clone, Debug)]
pub struct WorkerPolicy {
    pub config: WorkerConfig,
    pub params: ParamSet,
    actor: Mlp,
    critic: Mlp,
}

/// Actions in `[-1, 1]` and the pre-squash samples they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerAction {
    pub actions: Matrix,
    pub pre: Matrix,
}

impl WorkerPolicy {
    pub fn new<R: Rng + ?Sized>(config: WorkerConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 || config.units == 0 || !(0.0 < config.std_min && config.std_min < config.std_max) {
            return Err(Error::Config(
                "worker needs a hidden layer and 0 < std_min < std_max".into(),
            ));
        }
        let input = 3 * config.state_dim;
        let a = config.action_dim;
        let mut params = ParamSet::new();
        let actor = Mlp::new(
            &mut params,
            "worker.actor",
            MlpSpec::new(input, config.layers, config.units)
                .head("mean", a, Init::Zeros)
                .head("std", a, Init::Zeros),
            rng,
        );
        let critic = Mlp::new(
            &mut params,
            "worker.critic",
            MlpSpec::new(input, config.layers, config.units).head("v", 1, Init::Zeros),
            rng,
        );
        Ok(WorkerPolicy {
            config,
            params,
            actor,
            critic,
        })
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    /// `[s, g, g - s]` per row.
    pub fn inputs(&self, states: &Matrix, goals: &Matrix) -> Result<Matrix> {
        let d = self.config.state_dim;
        if states.cols() != d || goals.cols() != d || states.rows() != goals.rows() {
            return Err(Error::Shape(format!(
                "worker inputs: states {:?} and goals {:?}, expected [n, {d}] each",
                states.shape(),
                goals.shape()
            )));
        }
        let diff = goals.zip_map(states, |g, s| g - s);
        Ok(Matrix::hconcat(&[states, goals, &diff]))
    }

    fn std_of(&self, raw: f64) -> f64 {
        self.config.std_min + (self.config.std_max - self.config.std_min) * sigmoid(raw)
    }

    /// `(mean, std)` of the pre-squash Gaussian.
    pub fn distribution(&self, states: &Matrix, goals: &Matrix) -> Result<(Matrix, Matrix)> {
        let x = self.inputs(states, goals)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let outs = self.actor.forward(&mut tape, &self.params, xv)?;
        let mean = tape.value(outs[0]).clone();
        let std = tape.value(outs[1]).map(|r| self.std_of(r));
        Ok((mean, std))
    }

    pub fn act<R: Rng + ?Sized>(&self, states: &Matrix, goals: &Matrix, rng: &mut R, greedy: bool) -> Result<WorkerAction> {
        let (mean, std) = self.distribution(states, goals)?;
        let pre = if greedy {
            mean
        } else {
            let mut pre = mean;
            for (m, s) in pre.data_mut().iter_mut().zip(std.data()) {
                *m += s * rng.sample::<f64, _>(StandardNormal);
            }
            pre
        };
        Ok(WorkerAction {
            actions: pre.map(f64::tanh),
            pre,
        })
    }

    pub fn values(&self, states: &Matrix, goals: &Matrix) -> Result<Vec<f64>> {
        let x = self.inputs(states, goals)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let v = self.critic.forward(&mut tape, &self.params, xv)?[0];
        Ok(tape.value(v).data().to_vec())
    }

    /// Log-density of `pre` under the pre-squash Gaussian and the entropy
    /// relative to `std_min`, both `[rows, 1]`.
    fn log_prob_and_entropy(&self, tape: &mut Tape, x: Var, pre: &Matrix) -> Result<(Var, Var)> {
        let outs = self.actor.forward(tape, &self.params, x)?;
        let (lo, hi) = (self.config.std_min, self.config.std_max);
        let sig = tape.sigmoid(outs[1]);
        let span = tape.scale(sig, hi - lo);
        let std = tape.add_scalar(span, lo);
        let log_std = tape.log(std);
        let u = tape.constant(pre.clone());
        let diff = tape.sub(u, outs[0]);
        let sq = tape.square(diff);
        let m2 = tape.scale(log_std, -2.0);
        let inv_var = tape.exp(m2);
        let quad = tape.mul(sq, inv_var);
        let quad = tape.scale(quad, -0.5);
        let per_dim = tape.sub(quad, log_std);
        let per_dim = tape.add_scalar(per_dim, -0.5 * (2.0 * std::f64::consts::PI).ln());
        let logp = tape.sum_cols(per_dim);
        let rel = tape.add_scalar(log_std, -lo.ln());
        let ent = tape.sum_cols(rel);
        Ok((logp, ent))
    }
}

/// Worker chunks: `chunks` goal-conditioned segments of `k` steps.
///
/// `states` holds `k + 1` rows per chunk (`c * (k + 1) + t`); `pre_actions`,
/// `continues` and `alive` hold `k` rows per chunk (`c * k + t`).
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerBatch {
    pub chunks: usize,
    pub k: usize,
    pub states: Matrix,
    pub goals: Matrix,
    pub pre_actions: Matrix,
    /// 0 when the transition out of step `t` ended the episode.
    pub continues: Vec<f64>,
    /// 0 for steps after termination.
    pub alive: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkerReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Mean entropy relative to `std_min`.
    pub entropy: f64,
    pub reward: f64,
}

/// Rewards `cosine_max(s_{t+1}, g)` for each step of each chunk.
pub fn worker_rewards(batch: &WorkerBatch) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.chunks * batch.k);
    for c in 0..batch.chunks {
        let g = batch.goals.row(c);
        for t in 0..batch.k {
            out.push(cosine_max(batch.states.row(c * (batch.k + 1) + t + 1), g));
        }
    }
    out
}

/// Actor-critic losses for a worker batch; zeroes and then fills the
/// worker's gradients.
pub fn worker_losses(
    worker: &mut WorkerPolicy,
    batch: &WorkerBatch,
    returns: &LambdaReturnConfig,
    std_floor: f64,
    entropy_coeff: f64,
) -> Result<WorkerReport> {
    let (c, k) = (batch.chunks, batch.k);
    let n = c * k;
    if batch.states.rows() != c * (k + 1)
        || batch.goals.rows() != c
        || batch.pre_actions.rows() != n
        || batch.pre_actions.cols() != worker.config.action_dim
        || batch.continues.len() != n
        || batch.alive.len() != n
    {
        return Err(Error::Shape(format!("worker batch of {c} x {k} steps has inconsistent fields")));
    }
    returns.validate()?;
    let goal_rows: Vec<usize> = (0..c).flat_map(|i| std::iter::repeat_n(i, k + 1)).collect();
    let goals_all = batch.goals.select_rows(&goal_rows);
    let values = worker.values(&batch.states, &goals_all)?;
    let rewards = worker_rewards(batch);
    let mut targets = Vec::with_capacity(n);
    for i in 0..c {
        targets.extend(lambda_returns_with_continues(
            &rewards[i * k..(i + 1) * k],
            &values[i * (k + 1)..(i + 1) * (k + 1)],
            &batch.continues[i * k..(i + 1) * k],
            returns,
        )?);
    }
    let step_rows: Vec<usize> = (0..c).flat_map(|i| (0..k).map(move |t| i * (k + 1) + t)).collect();
    let raw_adv: Vec<f64> = targets.iter().zip(&step_rows).map(|(g, &r)| g - values[r]).collect();
    let adv = standardize(&raw_adv, &batch.alive, std_floor);

    let states = batch.states.select_rows(&step_rows);
    let goals = goals_all.select_rows(&step_rows);
    let x = worker.inputs(&states, &goals)?;
    let inv_c = 1.0 / c.max(1) as f64;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (logp, ent) = worker.log_prob_and_entropy(&mut tape, xv, &batch.pre_actions)?;
    let coef = tape.constant(Matrix::column(
        adv.iter().zip(&batch.alive).map(|(a, w)| -a * w * inv_c).collect(),
    ));
    let pg = tape.mul(logp, coef);
    let mut actor = tape.sum_all(pg);
    let wcol = Matrix::column(batch.alive.iter().map(|w| w * inv_c).collect());
    let alive = batch.alive.iter().sum::<f64>().max(1.0);
    let mean_entropy = tape
        .value(ent)
        .data()
        .iter()
        .zip(&batch.alive)
        .map(|(h, w)| h * w)
        .sum::<f64>()
        / alive;
    if entropy_coeff != 0.0 {
        let w = tape.constant(wcol.clone());
        let hw = tape.mul(ent, w);
        let hs = tape.sum_all(hw);
        let hs = tape.scale(hs, -entropy_coeff);
        actor = tape.add(actor, hs);
    }
    let v = worker.critic.forward(&mut tape, &worker.params, xv)?[0];
    let g = tape.constant(Matrix::column(targets));
    let d = tape.sub(v, g);
    let sq = tape.square(d);
    let w = tape.constant(wcol);
    let sw = tape.mul(sq, w);
    let critic = tape.sum_all(sw);
    let total = tape.add(actor, critic);
    worker.params.zero_grad();
    tape.backward(total, &mut worker.params);
    let reward = rewards.iter().zip(&batch.alive).map(|(r, w)| r * w).sum::<f64>() / alive;
    Ok(WorkerReport {
        actor_loss: tape.value(actor).item(),
        critic_loss: tape.value(critic).item(),
        entropy: mean_entropy,
        reward,
    })
}
