//! The manager: a shared actor trunk with one skill head per resolution and
//! a choice head, plus extrinsic and exploratory critics.

use rand::Rng;

use super::{lambda_returns_with_continues, standardize, LambdaReturnConfig};
use crate::error::{Error, Result};
use crate::numerics::categorical::{tape_entropy, tape_log_prob, tape_log_softmax};
use crate::numerics::mlp::{Init, Mlp, MlpSpec};
use crate::numerics::{CatMixture, LatentShape, Matrix, ParamSet, Tape, Var};
use crate::skills::SkillBank;

#[derive(Clone, Debug, PartialEq)]
pub struct ManagerConfig {
    pub state_dim: usize,
    /// Number of skill heads, one per resolution.
    pub heads: usize,
    pub latent: LatentShape,
    pub layers: usize,
    pub units: usize,
}

impl ManagerConfig {
    pub fn new(state_dim: usize, heads: usize) -> Self {
        ManagerConfig {
            state_dim,
            heads,
            latent: LatentShape::default(),
            layers: 4,
            units: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManagerPolicy {
    pub config: ManagerConfig,
    pub params: ParamSet,
    actor: Mlp,
    critic_ext: Mlp,
    critic_expl: Mlp,
}

/// One subgoal decision per input row.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgoal {
    pub goals: Matrix,
    /// Per head, `[rows, groups * classes]` one-hots.
    pub latents: Vec<Matrix>,
    pub choices: Vec<usize>,
    /// Per head, the decoded candidate goals.
    pub candidates: Vec<Matrix>,
}

impl ManagerPolicy {
    pub fn new<R: Rng + ?Sized>(config: ManagerConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || config.layers == 0 || config.units == 0 {
            return Err(Error::Config("manager needs at least one head and one hidden layer".into()));
        }
        let mut params = ParamSet::new();
        let zdim = config.latent.dim();
        let mut spec = MlpSpec::new(config.state_dim, config.layers, config.units);
        for i in 0..config.heads {
            spec = spec.head(format!("skill{i}"), zdim, Init::Zeros);
        }
        spec = spec.head("choice", config.heads, Init::Zeros);
        let actor = Mlp::new(&mut params, "manager.actor", spec, rng);
        let critic = |name: &str, params: &mut ParamSet, rng: &mut R| {
            let spec = MlpSpec::new(config.state_dim, config.layers, config.units).head("v", 1, Init::Zeros);
            Mlp::new(params, name, spec, rng)
        };
        let critic_ext = critic("manager.critic_ext", &mut params, rng);
        let critic_expl = critic("manager.critic_expl", &mut params, rng);
        Ok(ManagerPolicy {
            config,
            params,
            actor,
            critic_ext,
            critic_expl,
        })
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    /// Skill-head logits (one per head) followed by the choice logits.
    pub fn logits(&self, states: &Matrix) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let x = tape.constant(states.clone());
        let outs = self.actor.forward(&mut tape, &self.params, x)?;
        Ok(outs.iter().map(|&o| tape.value(o).clone()).collect())
    }

    /// `(v_ext, v_expl)` for every row.
    pub fn values(&self, states: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(states.clone());
        let e = self.critic_ext.forward(&mut tape, &self.params, x)?[0];
        let x = tape.constant(states.clone());
        let v = self.critic_expl.forward(&mut tape, &self.params, x)?[0];
        Ok((tape.value(e).data().to_vec(), tape.value(v).data().to_vec()))
    }

    fn choice_shape(&self) -> LatentShape {
        LatentShape::new(1, self.config.heads)
    }
}

fn onehot_rows(indices: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(indices.len(), classes);
    for (r, &i) in indices.iter().enumerate() {
        m.set(r, i, 1.0);
    }
    m
}

/// Samples (or, when `greedy`, takes the mode of) every skill head and the
/// choice head, then composes the subgoal with [`compose_subgoal`].
pub fn select_subgoals<R: Rng + ?Sized>(
    manager: &ManagerPolicy,
    bank: &SkillBank,
    states: &Matrix,
    rng: &mut R,
    greedy: bool,
) -> Result<Subgoal> {
    let n = manager.heads();
    if bank.len() != n {
        return Err(Error::Config(format!(
            "manager has {n} skill heads but the skill bank has {}",
            bank.len()
        )));
    }
    let logits = manager.logits(states)?;
    let mut latents = Vec::with_capacity(n);
    for l in logits.iter().take(n) {
        let dist = CatMixture::new(manager.config.latent, l.clone())?;
        latents.push(if greedy { dist.mode() } else { dist.sample(rng)?.onehot });
    }
    let choice_dist = CatMixture::new(manager.choice_shape(), logits[n].clone())?;
    let choice_onehot = if greedy {
        choice_dist.mode()
    } else {
        choice_dist.sample(rng)?.onehot
    };
    let choices: Vec<usize> = (0..states.rows())
        .map(|r| crate::numerics::categorical::argmax(choice_onehot.row(r)))
        .collect();
    compose_subgoal(bank, states, latents, choices)
}

/// Decodes every head's candidate from its latent and gates them with the
/// one-hot choice: `goal = sum_i c_i * candidate_i`.
pub fn compose_subgoal(bank: &SkillBank, states: &Matrix, latents: Vec<Matrix>, choices: Vec<usize>) -> Result<Subgoal> {
    let n = bank.len();
    if latents.len() != n || choices.len() != states.rows() || choices.iter().any(|&c| c >= n) {
        return Err(Error::Shape(format!(
            "subgoal: {} latents and {} choices for {} heads and {} states",
            latents.len(),
            choices.len(),
            n,
            states.rows()
        )));
    }
    let candidates = (0..n)
        .map(|i| bank.decode_values(i, states, &latents[i]))
        .collect::<Result<Vec<_>>>()?;
    let gate = onehot_rows(&choices, n);
    let mut goals = Matrix::zeros(states.rows(), states.cols());
    for (i, cand) in candidates.iter().enumerate() {
        for r in 0..states.rows() {
            let c = gate.get(r, i);
            for (g, v) in goals.row_mut(r).iter_mut().zip(cand.row(r)) {
                *g += c * v;
            }
        }
    }
    Ok(Subgoal {
        goals,
        latents,
        choices,
        candidates,
    })
}

/// Entropy-bonus weights for the choice head and each skill head.
#[derive(Clone, Debug, PartialEq)]
pub struct ManagerEntropy {
    pub choice: f64,
    pub heads: Vec<f64>,
}

impl ManagerEntropy {
    pub fn uniform(heads: usize, coeff: f64) -> Self {
        ManagerEntropy {
            choice: coeff,
            heads: vec![coeff; heads],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyLossReport {
    pub total: f64,
    pub choice_loss: f64,
    pub head_losses: Vec<f64>,
    /// Mean entropy per decision.
    pub choice_entropy: f64,
    pub head_entropies: Vec<f64>,
}

/// Builds the choice and skill-head losses on `tape`.
///
/// Rows are decisions; `weights` masks rows (0 = padding) and `batch` is the
/// number of trajectories the sums are averaged over. Head `i`'s score term
/// only sees rows where it was chosen, so a head that was never chosen gets
/// no score gradient at all.
#[allow(clippy::too_many_arguments)]
fn policy_terms(
    manager: &ManagerPolicy,
    tape: &mut Tape,
    states: &Matrix,
    latents: &[Matrix],
    choices: &[usize],
    advantages: &[f64],
    weights: &[f64],
    batch: usize,
    entropy: &ManagerEntropy,
) -> Result<(Option<Var>, PolicyLossReport)> {
    let n = manager.heads();
    let rows = states.rows();
    if latents.len() != n
        || latents.iter().any(|l| l.rows() != rows)
        || choices.len() != rows
        || advantages.len() != rows
        || weights.len() != rows
        || entropy.heads.len() != n
    {
        return Err(Error::Shape(format!(
            "manager loss: {rows} decisions with mismatched latents, choices, advantages, weights, or entropy weights"
        )));
    }
    if let Some(&c) = choices.iter().find(|&&c| c >= n) {
        return Err(Error::Shape(format!("choice {c} out of range for {n} heads")));
    }
    let inv_b = 1.0 / batch.max(1) as f64;
    let alive = weights.iter().filter(|&&w| w > 0.0).count().max(1) as f64;
    let x = tape.constant(states.clone());
    let outs = manager.actor.forward(tape, &manager.params, x)?;
    let mut report = PolicyLossReport {
        head_losses: vec![0.0; n],
        head_entropies: vec![0.0; n],
        ..Default::default()
    };
    let mut terms: Vec<Var> = Vec::new();

    let wa: Vec<f64> = advantages.iter().zip(weights).map(|(a, w)| -a * w * inv_b).collect();
    let wcol = Matrix::column(weights.iter().map(|w| w * inv_b).collect());

    let entropy_term = |tape: &mut Tape, logp: Var, coeff: f64| -> (Option<Var>, f64, f64) {
        let h = tape_entropy(tape, logp);
        let mean_h = tape
            .value(h)
            .data()
            .iter()
            .zip(weights)
            .map(|(h, w)| h * w)
            .sum::<f64>()
            / alive;
        if coeff == 0.0 {
            return (None, 0.0, mean_h);
        }
        let w = tape.constant(wcol.clone());
        let hw = tape.mul(h, w);
        let s = tape.sum_all(hw);
        let t = tape.scale(s, -coeff);
        let v = tape.value(t).item();
        (Some(t), v, mean_h)
    };

    // Choice head.
    let logp_c = tape_log_softmax(tape, outs[n], manager.choice_shape());
    let lp = tape_log_prob(tape, logp_c, &onehot_rows(choices, n));
    let coef = tape.constant(Matrix::column(wa.clone()));
    let pg = tape.mul(lp, coef);
    let pg = tape.sum_all(pg);
    report.choice_loss = tape.value(pg).item();
    terms.push(pg);
    let (t, v, h) = entropy_term(tape, logp_c, entropy.choice);
    report.choice_loss += v;
    report.choice_entropy = h;
    terms.extend(t);

    // Skill heads, gated by the choice.
    for i in 0..n {
        let logp = tape_log_softmax(tape, outs[i], manager.config.latent);
        let idx: Vec<usize> = (0..rows).filter(|&r| choices[r] == i && weights[r] > 0.0).collect();
        if !idx.is_empty() {
            let sel = tape.select_rows(logp, &idx);
            let lp = tape_log_prob(tape, sel, &latents[i].select_rows(&idx));
            let coef = tape.constant(Matrix::column(idx.iter().map(|&r| wa[r]).collect()));
            let pg = tape.mul(lp, coef);
            let pg = tape.sum_all(pg);
            report.head_losses[i] = tape.value(pg).item();
            terms.push(pg);
        }
        let (t, v, h) = entropy_term(tape, logp, entropy.heads[i]);
        report.head_losses[i] += v;
        report.head_entropies[i] = h;
        terms.extend(t);
    }
    report.total = report.choice_loss + report.head_losses.iter().sum::<f64>();
    let total = terms.into_iter().reduce(|a, b| tape.add(a, b));
    Ok((total, report))
}

/// Zeroes the manager's gradients and backpropagates the policy losses for
/// the given decisions and (already computed) advantages.
#[allow(clippy::too_many_arguments)]
pub fn manager_policy_loss(
    manager: &mut ManagerPolicy,
    states: &Matrix,
    latents: &[Matrix],
    choices: &[usize],
    advantages: &[f64],
    weights: &[f64],
    batch: usize,
    entropy: &ManagerEntropy,
) -> Result<PolicyLossReport> {
    let mut tape = Tape::new();
    let (total, report) = policy_terms(
        manager, &mut tape, states, latents, choices, advantages, weights, batch, entropy,
    )?;
    manager.params.zero_grad();
    if let Some(t) = total {
        tape.backward(t, &mut manager.params);
    }
    Ok(report)
}

/// Abstract trajectories: `batch` rollouts of `steps` manager decisions.
///
/// `states` holds `steps + 1` rows per rollout (`b * (steps + 1) + k`); the
/// per-decision fields hold `steps` rows per rollout (`b * steps + k`).
#[derive(Clone, Debug, PartialEq)]
pub struct AbstractBatch {
    pub batch: usize,
    pub steps: usize,
    pub states: Matrix,
    pub latents: Vec<Matrix>,
    pub choices: Vec<usize>,
    /// Extrinsic reward summed over each decision's `K` steps.
    pub ext_rewards: Vec<f64>,
    pub expl_rewards: Vec<f64>,
    /// 0 when the episode terminated during the decision's chunk.
    pub continues: Vec<f64>,
    /// 0 for decisions made after termination.
    pub alive: Vec<f64>,
}

impl AbstractBatch {
    fn validate(&self, heads: usize) -> Result<()> {
        let n = self.batch * self.steps;
        let ok = self.states.rows() == self.batch * (self.steps + 1)
            && self.latents.len() == heads
            && self.latents.iter().all(|l| l.rows() == n)
            && [
                self.choices.len(),
                self.ext_rewards.len(),
                self.expl_rewards.len(),
                self.continues.len(),
                self.alive.len(),
            ]
            .iter()
            .all(|&l| l == n);
        if !ok {
            return Err(Error::Shape(format!(
                "abstract batch of {} x {} decisions has inconsistent field lengths",
                self.batch, self.steps
            )));
        }
        Ok(())
    }

    fn decision_rows(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| (0..self.steps).map(move |k| b * (self.steps + 1) + k))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManagerLossConfig {
    pub returns: LambdaReturnConfig,
    /// Weights of the extrinsic and exploratory advantages.
    pub advantage_weights: [f64; 2],
    pub advantage_std_floor: f64,
}

impl Default for ManagerLossConfig {
    fn default() -> Self {
        ManagerLossConfig {
            returns: LambdaReturnConfig::default(),
            advantage_weights: [1.0, 0.1],
            advantage_std_floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManagerReport {
    pub policy: PolicyLossReport,
    pub critic_ext: f64,
    pub critic_expl: f64,
    pub return_ext: f64,
    pub return_expl: f64,
    pub advantages: Vec<f64>,
}

fn stream_returns(
    values: &[f64],
    rewards: &[f64],
    batch: &AbstractBatch,
    config: &LambdaReturnConfig,
) -> Result<Vec<f64>> {
    let (m, mut out) = (batch.steps, Vec::with_capacity(batch.batch * batch.steps));
    for b in 0..batch.batch {
        let v = &values[b * (m + 1)..(b + 1) * (m + 1)];
        let r = &rewards[b * m..(b + 1) * m];
        let c = &batch.continues[b * m..(b + 1) * m];
        out.extend(lambda_returns_with_continues(r, v, c, config)?);
    }
    Ok(out)
}

/// Full manager update signal: separate lambda-returns and critics for the
/// extrinsic and exploratory streams, standardized and weighted advantages,
/// gated policy losses, and squared-error critic losses. Zeroes and then
/// fills the manager's gradients.
pub fn manager_losses(
    manager: &mut ManagerPolicy,
    batch: &AbstractBatch,
    config: &ManagerLossConfig,
    entropy: &ManagerEntropy,
) -> Result<ManagerReport> {
    batch.validate(manager.heads())?;
    config.returns.validate()?;
    let (v_ext, v_expl) = manager.values(&batch.states)?;
    let g_ext = stream_returns(&v_ext, &batch.ext_rewards, batch, &config.returns)?;
    let g_expl = stream_returns(&v_expl, &batch.expl_rewards, batch, &config.returns)?;
    let rows = batch.decision_rows();
    let adv = |g: &[f64], v: &[f64]| -> Vec<f64> {
        let raw: Vec<f64> = g.iter().zip(&rows).map(|(g, &r)| g - v[r]).collect();
        standardize(&raw, &batch.alive, config.advantage_std_floor)
    };
    let a_ext = adv(&g_ext, &v_ext);
    let a_expl = adv(&g_expl, &v_expl);
    let [w_ext, w_expl] = config.advantage_weights;
    let advantages: Vec<f64> = a_ext.iter().zip(&a_expl).map(|(e, x)| w_ext * e + w_expl * x).collect();

    let states = batch.states.select_rows(&rows);
    let mut tape = Tape::new();
    let (policy, policy_report) = policy_terms(
        manager,
        &mut tape,
        &states,
        &batch.latents,
        &batch.choices,
        &advantages,
        &batch.alive,
        batch.batch,
        entropy,
    )?;
    let inv_b = 1.0 / batch.batch.max(1) as f64;
    let critic_term = |tape: &mut Tape, critic: &Mlp, targets: &[f64]| -> Result<(Var, f64)> {
        let x = tape.constant(states.clone());
        let v = critic.forward(tape, &manager.params, x)?[0];
        let g = tape.constant(Matrix::column(targets.to_vec()));
        let d = tape.sub(v, g);
        let sq = tape.square(d);
        let w = tape.constant(Matrix::column(batch.alive.iter().map(|a| a * inv_b).collect()));
        let sw = tape.mul(sq, w);
        let s = tape.sum_all(sw);
        let val = tape.value(s).item();
        Ok((s, val))
    };
    let (ce, critic_ext) = critic_term(&mut tape, &manager.critic_ext, &g_ext)?;
    let (cx, critic_expl) = critic_term(&mut tape, &manager.critic_expl, &g_expl)?;
    let mut total = tape.add(ce, cx);
    if let Some(p) = policy {
        total = tape.add(total, p);
    }
    manager.params.zero_grad();
    tape.backward(total, &mut manager.params);

    let alive = batch.alive.iter().sum::<f64>().max(1.0);
    let mean = |g: &[f64]| g.iter().zip(&batch.alive).map(|(g, a)| g * a).sum::<f64>() / alive;
    Ok(ManagerReport {
        policy: policy_report,
        critic_ext,
        critic_expl,
        return_ext: mean(&g_ext),
        return_expl: mean(&g_expl),
        advantages,
    })
}
