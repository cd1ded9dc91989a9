//! The learnable agent (skills, manager, worker, optimizers) and the acting
//! policy that refreshes subgoals every `K` steps.

use rand::{Rng, RngCore};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::hierarchy::{
    EntropyController, GoalSelector, ManagerConfig, ManagerEntropy, ManagerPolicy, WorkerConfig, WorkerPolicy,
};
use crate::numerics::{AdamConfig, AdamState, Checkpoint, LatentShape, Matrix};
use crate::skills::{SkillBank, SkillBankConfig};

#[derive(Clone, Debug)]
pub struct Agent {
    pub bank: SkillBank,
    pub manager: ManagerPolicy,
    pub worker: WorkerPolicy,
    pub bank_opt: AdamState,
    pub manager_opt: AdamState,
    pub worker_opt: AdamState,
    /// Choice head first, then one controller per skill head.
    pub manager_entropy: Vec<EntropyController>,
    pub worker_entropy: EntropyController,
    pub k: usize,
}

fn adam(config: &TrainConfig, lr: f64, set: &crate::numerics::ParamSet) -> AdamState {
    AdamState::new(
        set,
        AdamConfig {
            learning_rate: lr,
            epsilon: config.adam_epsilon,
            weight_decay: config.weight_decay,
            clip_norm: Some(config.grad_clip),
            ..AdamConfig::default()
        },
    )
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: &TrainConfig, obs_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let resolutions = config.resolution_set()?;
        let latent = LatentShape::new(config.latent_groups, config.latent_classes);
        let heads = resolutions.len();
        let bank = SkillBank::new(
            SkillBankConfig {
                latent,
                layers: config.mlp_layers,
                units: config.mlp_units,
                beta: config.kl_weight,
                free_bits: config.free_bits,
                ..SkillBankConfig::new(obs_dim)
            },
            resolutions,
            rng,
        )?;
        let manager = ManagerPolicy::new(
            ManagerConfig {
                latent,
                layers: config.mlp_layers,
                units: config.mlp_units,
                ..ManagerConfig::new(obs_dim, heads)
            },
            rng,
        )?;
        let worker = WorkerPolicy::new(
            WorkerConfig {
                layers: config.mlp_layers,
                units: config.mlp_units,
                std_min: config.worker_std_min,
                std_max: config.worker_std_max,
                ..WorkerConfig::new(obs_dim, action_dim)
            },
            rng,
        )?;
        let controller = EntropyController::new(config.entropy_initial, config.target_entropy);
        Ok(Agent {
            bank_opt: adam(config, config.skill_lr(), &bank.params),
            manager_opt: adam(config, config.manager_lr(), &manager.params),
            worker_opt: adam(config, config.worker_lr(), &worker.params),
            bank,
            manager,
            worker,
            manager_entropy: vec![controller; heads + 1],
            worker_entropy: controller,
            k: config.k,
        })
    }

    pub fn heads(&self) -> usize {
        self.bank.len()
    }

    pub fn manager_entropy_weights(&self) -> ManagerEntropy {
        ManagerEntropy {
            choice: self.manager_entropy[0].coeff,
            heads: self.manager_entropy[1..].iter().map(|c| c.coeff).collect(),
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.add_params("bank", &self.bank.params)?;
        ckpt.add_params("manager", &self.manager.params)?;
        ckpt.add_params("worker", &self.worker.params)?;
        for (group, opt) in [
            ("opt.bank", &self.bank_opt),
            ("opt.manager", &self.manager_opt),
            ("opt.worker", &self.worker_opt),
        ] {
            ckpt.add_list(group, "m", &opt.first)?;
            ckpt.add_list(group, "v", &opt.second)?;
            ckpt.add(group, "step", Matrix::scalar(opt.step as f64))?;
        }
        let mut coeffs: Vec<f64> = self.manager_entropy.iter().map(|c| c.coeff).collect();
        coeffs.push(self.worker_entropy.coeff);
        ckpt.add("entropy", "coeffs", Matrix::row_vector(coeffs))?;
        Ok(())
    }

    /// Overwrites weights, optimizer moments, and entropy weights from a
    /// checkpoint written by an identically configured agent.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_params("bank", &mut self.bank.params)?;
        ckpt.load_params("manager", &mut self.manager.params)?;
        ckpt.load_params("worker", &mut self.worker.params)?;
        for (group, opt) in [
            ("opt.bank", &mut self.bank_opt),
            ("opt.manager", &mut self.manager_opt),
            ("opt.worker", &mut self.worker_opt),
        ] {
            let n = opt.first.len();
            let first = ckpt.get_list(group, "m", n)?;
            let second = ckpt.get_list(group, "v", n)?;
            for (a, b) in first.iter().zip(&opt.first).chain(second.iter().zip(&opt.second)) {
                if a.shape() != b.shape() {
                    return Err(Error::Checkpoint(format!("{group}: optimizer moment shape mismatch")));
                }
            }
            opt.first = first;
            opt.second = second;
            opt.step = ckpt.get(group, "step")?.item() as u64;
        }
        let coeffs = ckpt.get("entropy", "coeffs")?.data();
        if coeffs.len() != self.manager_entropy.len() + 1 {
            return Err(Error::Checkpoint("entropy/coeffs has the wrong length".into()));
        }
        for (c, &v) in self.manager_entropy.iter_mut().zip(coeffs) {
            c.coeff = v;
        }
        self.worker_entropy.coeff = coeffs[coeffs.len() - 1];
        Ok(())
    }
}

/// Acting state carried between environment steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    /// Steps taken in the current episode.
    pub t: usize,
    pub prev_state: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub subgoal: Vec<f64>,
    pub choice: usize,
}

impl AgentState {
    pub fn new(obs_dim: usize, action_dim: usize) -> Self {
        AgentState {
            t: 0,
            prev_state: vec![0.0; obs_dim],
            prev_action: vec![0.0; action_dim],
            subgoal: vec![0.0; obs_dim],
            choice: 0,
        }
    }

    pub fn to_row(&self) -> Vec<f64> {
        let mut r = vec![self.t as f64, self.choice as f64];
        r.extend(&self.prev_state);
        r.extend(&self.prev_action);
        r.extend(&self.subgoal);
        r
    }

    pub fn from_row(row: &[f64], obs_dim: usize, action_dim: usize) -> Result<Self> {
        if row.len() != 2 + 2 * obs_dim + action_dim {
            return Err(Error::Checkpoint("agent state row has the wrong width".into()));
        }
        let (s, rest) = row[2..].split_at(obs_dim);
        let (a, g) = rest.split_at(action_dim);
        Ok(AgentState {
            t: row[0] as usize,
            choice: row[1] as usize,
            prev_state: s.to_vec(),
            prev_action: a.to_vec(),
            subgoal: g.to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub action: Vec<f64>,
    pub state: AgentState,
    /// Whether a new subgoal was selected on this step.
    pub refreshed: bool,
}

/// One acting step: picks a new subgoal when `t mod K = 0`, otherwise keeps
/// the previous one, then lets the worker act toward it.
pub fn collect_policy_step(
    state: &AgentState,
    obs: &[f64],
    agent: &Agent,
    selector: &dyn GoalSelector,
    rng: &mut dyn RngCore,
    greedy: bool,
) -> Result<PolicyStep> {
    let s = Matrix::row_vector(obs.to_vec());
    let refreshed = state.t % agent.k == 0;
    let (subgoal, choice) = if refreshed {
        let sg = selector.select(&agent.manager, &agent.bank, &s, rng, greedy)?;
        (sg.goals.row(0).to_vec(), sg.choices[0])
    } else {
        (state.subgoal.clone(), state.choice)
    };
    let act = agent
        .worker
        .act(&s, &Matrix::row_vector(subgoal.clone()), rng, greedy)?;
    let action = act.actions.row(0).to_vec();
    Ok(PolicyStep {
        state: AgentState {
            t: state.t + 1,
            prev_state: obs.to_vec(),
            prev_action: action.clone(),
            subgoal,
            choice,
        },
        action,
        refreshed,
    })
}
