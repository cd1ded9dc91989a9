//! Policy rollouts from replayed states and their split into worker chunks
//! and manager abstractions.

use rand::RngCore;

use super::agent::Agent;
use crate::envs::{EnvSnapshot, Environment};
use crate::error::{Error, Result};
use crate::hierarchy::{AbstractBatch, GoalSelector, WorkerBatch};
use crate::numerics::Matrix;
use crate::skills::exploratory_rewards;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelStep {
    pub obs: Matrix,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
}

/// Dynamics used to roll the policy forward from replayed states.
pub trait RolloutModel {
    /// Starts one rollout per snapshot; returns the starting observations.
    fn start(&mut self, snapshots: &[EnvSnapshot]) -> Result<Matrix>;

    /// Advances every rollout. Finished rollouts keep their last observation
    /// and earn nothing.
    fn step(&mut self, actions: &Matrix) -> Result<ModelStep>;
}

/// The real environment, restored from snapshots. Time limits are ignored
/// (the episode clock restarts at every start), so only true terminal
/// events end a rollout.
pub struct EnvModel {
    template: Box<dyn Environment>,
    envs: Vec<Box<dyn Environment>>,
    done: Vec<bool>,
}

impl EnvModel {
    pub fn new(template: Box<dyn Environment>) -> Self {
        EnvModel {
            template,
            envs: Vec::new(),
            done: Vec::new(),
        }
    }
}

impl RolloutModel for EnvModel {
    fn start(&mut self, snapshots: &[EnvSnapshot]) -> Result<Matrix> {
        while self.envs.len() < snapshots.len() {
            self.envs.push(self.template.boxed_clone());
        }
        self.done = vec![false; snapshots.len()];
        let d = self.template.obs_dim();
        let mut obs = Matrix::zeros(snapshots.len(), d);
        for (i, s) in snapshots.iter().enumerate() {
            let env = &mut self.envs[i];
            env.restore(&EnvSnapshot { t: 0, done: false, ..*s });
            obs.row_mut(i).copy_from_slice(&env.observe());
        }
        Ok(obs)
    }

    fn step(&mut self, actions: &Matrix) -> Result<ModelStep> {
        let n = self.done.len();
        if actions.rows() != n {
            return Err(Error::Shape(format!("{} actions for {n} rollouts", actions.rows())));
        }
        let mut obs = Matrix::zeros(n, self.template.obs_dim());
        let mut rewards = vec![0.0; n];
        let mut terminal = vec![false; n];
        for i in 0..n {
            let env = &mut self.envs[i];
            if !self.done[i] {
                let r = env.step(actions.row(i))?;
                rewards[i] = r.reward;
                self.done[i] = r.done;
            }
            terminal[i] = self.done[i];
            obs.row_mut(i).copy_from_slice(&env.observe());
        }
        Ok(ModelStep { obs, rewards, terminal })
    }
}

/// A batch of `T`-step policy rollouts, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `T + 1` matrices of `[rollouts, obs_dim]`.
    pub states: Vec<Matrix>,
    /// `T` matrices of pre-squash actions.
    pub pre_actions: Vec<Matrix>,
    /// `[t][rollout]` reward of the transition out of step `t`.
    pub ext_rewards: Vec<Vec<f64>>,
    /// `[t][rollout]` exploratory reward of reaching step `t + 1`.
    pub expl_rewards: Vec<Vec<f64>>,
    /// `[t][rollout]` 1 while the rollout had not terminated before step `t`.
    pub alive: Vec<Vec<f64>>,
    /// `[t][rollout]` 0 when the transition out of step `t` terminated.
    pub continues: Vec<Vec<f64>>,
    /// Per manager decision.
    pub goals: Vec<Matrix>,
    pub latents: Vec<Vec<Matrix>>,
    pub choices: Vec<Vec<usize>>,
}

impl Rollout {
    pub fn rollouts(&self) -> usize {
        self.states[0].rows()
    }

    pub fn horizon(&self) -> usize {
        self.pre_actions.len()
    }
}

/// Rolls the hierarchical policy forward for `horizon` steps, choosing
/// subgoals every `agent.k` steps, and scores every step with the
/// exploratory reward of `(s_0, s_t)`.
pub fn generate_rollout(
    model: &mut dyn RolloutModel,
    agent: &Agent,
    selector: &dyn GoalSelector,
    starts: &[EnvSnapshot],
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Rollout> {
    let k = agent.k;
    if horizon == 0 || horizon % k != 0 {
        return Err(Error::Config(format!("rollout horizon {horizon} is not a multiple of K = {k}")));
    }
    let n = starts.len();
    let s0 = model.start(starts)?;
    let mut out = Rollout {
        states: vec![s0.clone()],
        pre_actions: Vec::with_capacity(horizon),
        ext_rewards: Vec::with_capacity(horizon),
        expl_rewards: Vec::with_capacity(horizon),
        alive: Vec::with_capacity(horizon),
        continues: Vec::with_capacity(horizon),
        goals: Vec::new(),
        latents: Vec::new(),
        choices: Vec::new(),
    };
    let mut alive = vec![1.0; n];
    let mut goals = Matrix::zeros(n, s0.cols());
    for t in 0..horizon {
        let s = out.states[t].clone();
        if t % k == 0 {
            let sg = selector.select(&agent.manager, &agent.bank, &s, rng, false)?;
            goals = sg.goals.clone();
            out.goals.push(sg.goals);
            out.latents.push(sg.latents);
            out.choices.push(sg.choices);
        }
        let act = agent.worker.act(&s, &goals, rng, false)?;
        let mut actions = act.actions;
        for (i, &a) in alive.iter().enumerate() {
            if a == 0.0 {
                actions.row_mut(i).fill(0.0);
            }
        }
        let step = model.step(&actions)?;
        out.alive.push(alive.clone());
        out.ext_rewards.push(step.rewards.iter().zip(&alive).map(|(r, a)| r * a).collect());
        out.continues.push(step.terminal.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect());
        for (a, &d) in alive.iter_mut().zip(&step.terminal) {
            if d {
                *a = 0.0;
            }
        }
        out.pre_actions.push(act.pre);
        out.states.push(step.obs);
    }
    let all_next = Matrix::vconcat(&out.states[1..].iter().collect::<Vec<_>>());
    let all_start = Matrix::vconcat(&vec![&s0; horizon]);
    let expl = exploratory_rewards(&agent.bank, &all_start, &all_next, rng)?;
    for t in 0..horizon {
        out.expl_rewards.push(
            expl[t * n..(t + 1) * n]
                .iter()
                .zip(&out.alive[t])
                .map(|(r, a)| r * a)
                .collect(),
        );
    }
    Ok(out)
}

/// Manager-level view: one decision per `K` steps with chunk-summed rewards.
pub fn abstract_batch(rollout: &Rollout, k: usize) -> AbstractBatch {
    let (n, h) = (rollout.rollouts(), rollout.horizon());
    let m = h / k;
    let d = rollout.states[0].cols();
    let heads = rollout.latents[0].len();
    let zdim = rollout.latents[0][0].cols();
    let mut states = Matrix::zeros(n * (m + 1), d);
    let mut latents = vec![Matrix::zeros(n * m, zdim); heads];
    let mut batch = AbstractBatch {
        batch: n,
        steps: m,
        states: Matrix::zeros(0, 0),
        latents: Vec::new(),
        choices: vec![0; n * m],
        ext_rewards: vec![0.0; n * m],
        expl_rewards: vec![0.0; n * m],
        continues: vec![1.0; n * m],
        alive: vec![0.0; n * m],
    };
    for b in 0..n {
        for kk in 0..=m {
            states.row_mut(b * (m + 1) + kk).copy_from_slice(rollout.states[kk * k].row(b));
        }
        for kk in 0..m {
            let row = b * m + kk;
            for (i, l) in latents.iter_mut().enumerate() {
                l.row_mut(row).copy_from_slice(rollout.latents[kk][i].row(b));
            }
            batch.choices[row] = rollout.choices[kk][b];
            batch.alive[row] = rollout.alive[kk * k][b];
            for t in kk * k..(kk + 1) * k {
                batch.ext_rewards[row] += rollout.ext_rewards[t][b];
                batch.expl_rewards[row] += rollout.expl_rewards[t][b];
                if rollout.alive[t][b] > 0.0 && rollout.continues[t][b] == 0.0 {
                    batch.continues[row] = 0.0;
                }
            }
        }
    }
    batch.states = states;
    batch.latents = latents;
    batch
}

/// Worker-level view: one chunk per manager decision, conditioned on that
/// decision's goal.
pub fn worker_batch(rollout: &Rollout, k: usize) -> WorkerBatch {
    let (n, h) = (rollout.rollouts(), rollout.horizon());
    let m = h / k;
    let d = rollout.states[0].cols();
    let a = rollout.pre_actions[0].cols();
    let chunks = n * m;
    let mut wb = WorkerBatch {
        chunks,
        k,
        states: Matrix::zeros(chunks * (k + 1), d),
        goals: Matrix::zeros(chunks, d),
        pre_actions: Matrix::zeros(chunks * k, a),
        continues: vec![1.0; chunks * k],
        alive: vec![0.0; chunks * k],
    };
    for b in 0..n {
        for kk in 0..m {
            let c = b * m + kk;
            wb.goals.row_mut(c).copy_from_slice(rollout.goals[kk].row(b));
            for j in 0..=k {
                wb.states
                    .row_mut(c * (k + 1) + j)
                    .copy_from_slice(rollout.states[kk * k + j].row(b));
            }
            for j in 0..k {
                let t = kk * k + j;
                wb.pre_actions.row_mut(c * k + j).copy_from_slice(rollout.pre_actions[t].row(b));
                wb.alive[c * k + j] = rollout.alive[t][b];
                wb.continues[c * k + j] = rollout.continues[t][b];
            }
        }
    }
    wb
}
