//! One training iteration: skill update, policy rollouts, and the manager
//! and worker updates.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::agent::Agent;
use super::config::TrainConfig;
use super::replay::{ReplayBuffer, Segment};
use super::rollout::{abstract_batch, generate_rollout, worker_batch, RolloutModel};
use crate::error::{Error, Result};
use crate::hierarchy::{manager_losses, worker_losses, GoalSelector, LambdaReturnConfig, ManagerLossConfig};
use crate::skills::{batch_from_pairs, extract_pairs, skill_elbo_loss, PairBatch};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `train` or `eval`.
    pub kind: String,
    pub step: u64,
    pub iteration: u64,
    /// `ok`, `not_ready`, or `skipped`.
    pub status: String,
    /// Mean return of training episodes finished since the previous record.
    pub episode_return: Option<f64>,
    pub eval_return: Option<f64>,
    pub eval_success: Option<f64>,
    pub losses: BTreeMap<String, f64>,
    pub entropies: BTreeMap<String, f64>,
    /// Collection-time choice counts over the recent decision window.
    pub choice_histogram: Vec<u64>,
    pub expl_reward: Option<f64>,
    /// Iterations skipped so far because of a numeric failure.
    pub skipped: u64,
}

fn skill_batches<R: Rng + ?Sized>(
    agent: &Agent,
    segments: &[Segment],
    cap: usize,
    rng: &mut R,
) -> Result<Vec<PairBatch>> {
    let res = &agent.bank.resolutions;
    let dim = agent.bank.state_dim();
    let mut out = Vec::new();
    for i in 0..res.len() {
        let mut pairs: Vec<_> = segments.iter().flat_map(|s| extract_pairs(&s.states, res, i)).collect();
        if pairs.is_empty() {
            continue;
        }
        if cap > 0 && pairs.len() > cap {
            let mut keep = sample_indices(rng, pairs.len(), cap).into_vec();
            keep.sort_unstable();
            pairs = keep.into_iter().map(|j| pairs[j].clone()).collect();
        }
        let mut b = batch_from_pairs(&pairs, dim)?;
        b.resolution = i;
        out.push(b);
    }
    Ok(out)
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Runs one iteration. Returns a `not_ready` record when the replay holds no
/// full segment, and a `skipped` record (without touching weights further)
/// when any loss or update hits a non-finite value.
pub fn train_iteration(
    replay: &ReplayBuffer,
    agent: &mut Agent,
    model: &mut dyn RolloutModel,
    selector: &dyn GoalSelector,
    config: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<MetricsRecord> {
    let mut record = MetricsRecord {
        kind: "train".into(),
        status: "ok".into(),
        ..Default::default()
    };
    if !replay.ready() {
        record.status = "not_ready".into();
        return Ok(record);
    }
    match iteration_body(replay, agent, model, selector, config, rng, &mut record) {
        Ok(()) => Ok(record),
        Err(e) if is_numeric(&e) => {
            warn!("skipping training iteration: {e}");
            record.status = "skipped".into();
            Ok(record)
        }
        Err(e) => Err(e),
    }
}

fn iteration_body(
    replay: &ReplayBuffer,
    agent: &mut Agent,
    model: &mut dyn RolloutModel,
    selector: &dyn GoalSelector,
    config: &TrainConfig,
    rng: &mut dyn RngCore,
    record: &mut MetricsRecord,
) -> Result<()> {
    let segments = replay.sample(config.batch_size, rng)?;

    // Skills.
    let batches = skill_batches(agent, &segments, config.skill_pairs, rng)?;
    let elbo = skill_elbo_loss(&mut agent.bank, &batches, rng)?;
    agent.bank_opt.step(&mut agent.bank.params)?;
    record.losses.insert("skill_elbo".into(), elbo.elbo);
    for (i, g) in elbo.groups.iter().enumerate() {
        if let Some(g) = g {
            let h = agent.bank.resolutions.get(i);
            record.losses.insert(format!("skill_recon_{h}"), g.recon);
            record.losses.insert(format!("skill_kl_{h}"), g.kl);
        }
    }

    // Rollouts from replayed states.
    let pool: Vec<_> = segments.iter().flat_map(|s| s.snapshots.iter().copied()).collect();
    let want = config.effective_rollout_starts();
    let starts: Vec<_> = if want <= pool.len() {
        let mut idx = sample_indices(rng, pool.len(), want).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    } else {
        (0..want).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    let rollout = generate_rollout(model, agent, selector, &starts, config.horizon, rng)?;
    let returns = LambdaReturnConfig {
        lambda: config.lambda,
        gamma: config.gamma,
    };

    // Manager.
    let ab = abstract_batch(&rollout, agent.k);
    let alive = ab.alive.iter().sum::<f64>().max(1.0);
    record.expl_reward = Some(ab.expl_rewards.iter().sum::<f64>() / alive);
    record.losses.insert(
        "rollout_ext_reward".into(),
        ab.ext_rewards.iter().sum::<f64>() / alive,
    );
    if selector.name() == "mrs" {
        let mcfg = ManagerLossConfig {
            returns,
            advantage_weights: [config.advantage_weight_ext, config.advantage_weight_expl],
            advantage_std_floor: config.advantage_std_floor,
        };
        let weights = agent.manager_entropy_weights();
        let rep = manager_losses(&mut agent.manager, &ab, &mcfg, &weights)?;
        agent.manager_opt.step(&mut agent.manager.params)?;
        let n = agent.heads();
        agent.manager_entropy[0].update(rep.policy.choice_entropy, (n as f64).ln());
        let hmax = agent.bank.latent().max_entropy();
        for i in 0..n {
            agent.manager_entropy[i + 1].update(rep.policy.head_entropies[i], hmax);
        }
        record.losses.insert("manager_policy".into(), rep.policy.total);
        record.losses.insert("manager_critic_ext".into(), rep.critic_ext);
        record.losses.insert("manager_critic_expl".into(), rep.critic_expl);
        record.losses.insert("manager_return_ext".into(), rep.return_ext);
        record.entropies.insert("choice".into(), rep.policy.choice_entropy);
        for (i, h) in rep.policy.head_entropies.iter().enumerate() {
            record
                .entropies
                .insert(format!("skill_{}", agent.bank.resolutions.get(i)), *h);
        }
        record.entropies.insert("choice_coeff".into(), agent.manager_entropy[0].coeff);
    }

    // Worker.
    let wb = worker_batch(&rollout, agent.k);
    let rep = worker_losses(
        &mut agent.worker,
        &wb,
        &returns,
        config.advantage_std_floor,
        agent.worker_entropy.coeff,
    )?;
    agent.worker_opt.step(&mut agent.worker.params)?;
    agent
        .worker_entropy
        .update(rep.entropy, agent.worker.config.max_entropy());
    record.losses.insert("worker_actor".into(), rep.actor_loss);
    record.losses.insert("worker_critic".into(), rep.critic_loss);
    record.losses.insert("worker_goal_reward".into(), rep.reward);
    record.entropies.insert("worker".into(), rep.entropy);
    record.entropies.insert("worker_coeff".into(), agent.worker_entropy.coeff);
    Ok(())
}
