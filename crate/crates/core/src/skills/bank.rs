//! The skill bank: one encoder trunk and one decoder trunk shared across
//! resolutions, with a resolution-specific encoder output layer and decoder
//! input layer per horizon.

use log::debug;
use rand::Rng;

use super::{Horizon, ResolutionSet, TransitionPair};
use crate::error::{Error, Result};
use crate::numerics::categorical::{tape_kl_uniform_per_group, tape_log_softmax};
use crate::numerics::mlp::{DenseBlock, Init, Linear};
use crate::numerics::{CatMixture, LatentShape, Matrix, ParamSet, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SkillBankConfig {
    pub state_dim: usize,
    pub latent: LatentShape,
    pub layers: usize,
    pub units: usize,
    /// KL weight.
    pub beta: f64,
    /// Per-group KL floor (nats) inside the training objective.
    pub free_bits: f64,
}

impl SkillBankConfig {
    pub fn new(state_dim: usize) -> Self {
        SkillBankConfig {
            state_dim,
            latent: LatentShape::default(),
            layers: 4,
            units: 512,
            beta: 1.0,
            free_bits: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SkillBank {
    pub config: SkillBankConfig,
    pub resolutions: ResolutionSet,
    pub params: ParamSet,
    enc_trunk: Vec<DenseBlock>,
    enc_heads: Vec<Linear>,
    dec_inputs: Vec<DenseBlock>,
    dec_trunk: Vec<DenseBlock>,
    dec_out: Linear,
}

/// Same-resolution pairs stacked row-wise. `start` is ignored for the
/// infinite resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub resolution: usize,
    pub start: Matrix,
    pub target: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeOutput {
    pub posterior: CatMixture,
    pub z: Matrix,
    pub reconstruction: Matrix,
    pub recon_error: f64,
    /// Raw `KL[posterior || prior]`, no free-bits floor.
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub count: usize,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboReport {
    /// The optimized objective (free-bits KL).
    pub loss: f64,
    /// Summed ELBO with the raw KL.
    pub elbo: f64,
    pub groups: Vec<Option<GroupStats>>,
}

impl ElboReport {
    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(Option::is_none)
    }
}

impl SkillBank {
    pub fn new<R: Rng + ?Sized>(config: SkillBankConfig, resolutions: ResolutionSet, rng: &mut R) -> Result<Self> {
        if config.layers == 0 || config.units == 0 || config.state_dim == 0 {
            return Err(Error::Config("skill bank needs at least one hidden layer".into()));
        }
        let d = config.state_dim;
        let zdim = config.latent.dim();
        let h = config.units;
        let mut params = ParamSet::new();
        let mut width = 2 * d;
        let mut enc_trunk = Vec::new();
        for l in 0..config.layers {
            enc_trunk.push(DenseBlock::new(&mut params, &format!("enc.h{l}"), width, h, rng));
            width = h;
        }
        let enc_heads = (0..resolutions.len())
            .map(|i| Linear::new(&mut params, &format!("enc.head{i}"), h, zdim, Init::TruncNormal, rng))
            .collect();
        let dec_inputs = (0..resolutions.len())
            .map(|i| DenseBlock::new(&mut params, &format!("dec.in{i}"), d + zdim, h, rng))
            .collect();
        let dec_trunk = (1..config.layers)
            .map(|l| DenseBlock::new(&mut params, &format!("dec.h{l}"), h, h, rng))
            .collect();
        let dec_out = Linear::new(&mut params, "dec.out", h, d, Init::TruncNormal, rng);
        Ok(SkillBank {
            config,
            resolutions,
            params,
            enc_trunk,
            enc_heads,
            dec_inputs,
            dec_trunk,
            dec_out,
        })
    }

    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolutions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    pub fn latent(&self) -> LatentShape {
        self.config.latent
    }

    pub fn enc_head(&self, i: usize) -> &Linear {
        &self.enc_heads[i]
    }

    pub fn dec_input(&self, i: usize) -> &DenseBlock {
        &self.dec_inputs[i]
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Config(format!(
                "resolution {i} out of range for a bank with {} heads",
                self.len()
            )));
        }
        Ok(())
    }

    /// The conditioning input seen by head `i`: the start state, or zeros for
    /// the infinite resolution.
    fn condition(&self, tape: &mut Tape, i: usize, start: Var) -> Var {
        if self.resolutions.get(i) == Horizon::Infinite {
            let rows = tape.value(start).rows();
            tape.constant(Matrix::zeros(rows, self.config.state_dim))
        } else {
            start
        }
    }

    pub fn encode(&self, tape: &mut Tape, i: usize, start: Var, target: Var) -> Result<Var> {
        self.check_index(i)?;
        let cond = self.condition(tape, i, start);
        let mut h = tape.concat_cols(&[cond, target]);
        for (l, block) in self.enc_trunk.iter().enumerate() {
            h = block.forward(tape, &self.params, h);
            if !tape.value(h).is_finite() {
                return Err(Error::NonFinite(format!("skill encoder hidden layer {l}")));
            }
        }
        let logits = self.enc_heads[i].forward(tape, &self.params, h);
        if !tape.value(logits).is_finite() {
            return Err(Error::NonFinite(format!("skill encoder head {i}")));
        }
        Ok(logits)
    }

    pub fn decode(&self, tape: &mut Tape, i: usize, start: Var, z: Var) -> Result<Var> {
        self.check_index(i)?;
        let cond = self.condition(tape, i, start);
        let x = tape.concat_cols(&[cond, z]);
        let mut h = self.dec_inputs[i].forward(tape, &self.params, x);
        for block in &self.dec_trunk {
            h = block.forward(tape, &self.params, h);
        }
        let out = self.dec_out.forward(tape, &self.params, h);
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite(format!("skill decoder {i}")));
        }
        Ok(out)
    }

    /// Posterior `Enc_i(z | start, target)` for every row.
    pub fn posterior(&self, i: usize, start: &Matrix, target: &Matrix) -> Result<CatMixture> {
        let mut tape = Tape::new();
        let s = tape.constant(start.clone());
        let t = tape.constant(target.clone());
        let logits = self.encode(&mut tape, i, s, t)?;
        CatMixture::new(self.config.latent, tape.value(logits).clone())
    }

    /// Posteriors of several heads, sharing one trunk pass between heads that
    /// see the same conditioning input.
    pub fn posteriors(&self, heads: &[usize], start: &Matrix, target: &Matrix) -> Result<Vec<CatMixture>> {
        let mut tape = Tape::new();
        let s = tape.constant(start.clone());
        let t = tape.constant(target.clone());
        let mut hidden: [Option<Var>; 2] = [None, None];
        let mut out = Vec::with_capacity(heads.len());
        for &i in heads {
            self.check_index(i)?;
            let slot = usize::from(self.resolutions.get(i) == Horizon::Infinite);
            let h = match hidden[slot] {
                Some(h) => h,
                None => {
                    let cond = self.condition(&mut tape, i, s);
                    let mut h = tape.concat_cols(&[cond, t]);
                    for (l, block) in self.enc_trunk.iter().enumerate() {
                        h = block.forward(&mut tape, &self.params, h);
                        if !tape.value(h).is_finite() {
                            return Err(Error::NonFinite(format!("skill encoder hidden layer {l}")));
                        }
                    }
                    hidden[slot] = Some(h);
                    h
                }
            };
            let logits = self.enc_heads[i].forward(&mut tape, &self.params, h);
            if !tape.value(logits).is_finite() {
                return Err(Error::NonFinite(format!("skill encoder head {i}")));
            }
            out.push(CatMixture::new(self.config.latent, tape.value(logits).clone())?);
        }
        Ok(out)
    }

    /// `Dec_i(start, z)` for every row.
    pub fn decode_values(&self, i: usize, start: &Matrix, z: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let s = tape.constant(start.clone());
        let zv = tape.constant(z.clone());
        let out = self.decode(&mut tape, i, s, zv)?;
        Ok(tape.value(out).clone())
    }
}

fn row_sq_dist(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect()
}

/// Encodes a single pair, samples a skill, and decodes it.
pub fn cvae_forward<R: Rng + ?Sized>(bank: &SkillBank, pair: &TransitionPair, rng: &mut R) -> Result<CvaeOutput> {
    let d = bank.state_dim();
    let start = Matrix::row_vector(pair.start.clone().unwrap_or_else(|| vec![0.0; d]));
    let target = Matrix::row_vector(pair.target.clone());
    if start.cols() != d || target.cols() != d {
        return Err(Error::Shape(format!("pair states must have {d} features")));
    }
    let posterior = bank.posterior(pair.resolution, &start, &target)?;
    let z = posterior.sample(rng)?.onehot;
    let reconstruction = bank.decode_values(pair.resolution, &start, &z)?;
    let recon_error = row_sq_dist(&target, &reconstruction)[0];
    let kl = posterior.kl(&CatMixture::uniform(bank.latent(), 1))?[0];
    Ok(CvaeOutput {
        posterior,
        z,
        reconstruction,
        recon_error,
        kl,
    })
}

/// Summed ELBO over resolution groups; writes fresh gradients into
/// `bank.params` (previous gradients are cleared).
pub fn skill_elbo_loss<R: Rng + ?Sized>(
    bank: &mut SkillBank,
    batches: &[PairBatch],
    rng: &mut R,
) -> Result<ElboReport> {
    skill_elbo_loss_anchored(bank, batches, rng, None).map(|(r, _)| r)
}

/// [`skill_elbo_loss`] with explicit straight-through anchors, one per batch.
///
/// The straight-through value is `sample + probs - anchor`. Passing the
/// anchors returned by an earlier call freezes them, which makes the
/// objective a smooth function of the weights for finite-difference checks.
/// Returns the probabilities used as anchors.
pub fn skill_elbo_loss_anchored<R: Rng + ?Sized>(
    bank: &mut SkillBank,
    batches: &[PairBatch],
    rng: &mut R,
    anchors: Option<&[Matrix]>,
) -> Result<(ElboReport, Vec<Matrix>)> {
    bank.params.zero_grad();
    let mut used = Vec::new();
    let mut report = ElboReport {
        loss: 0.0,
        elbo: 0.0,
        groups: vec![None; bank.len()],
    };
    let shape = bank.latent();
    let beta = bank.config.beta;
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for batch in batches {
        let n = batch.target.rows();
        if n == 0 {
            continue;
        }
        let i = batch.resolution;
        bank.check_index(i)?;
        if report.groups[i].is_some() {
            return Err(Error::Shape(format!("resolution {i} appears in two batches")));
        }
        let start = tape.constant(batch.start.clone());
        let target = tape.constant(batch.target.clone());
        let logits = bank.encode(&mut tape, i, start, target)?;
        let logp = tape_log_softmax(&mut tape, logits, shape);
        let post = CatMixture::new(shape, tape.value(logits).clone())?;
        let sample = post.sample(rng)?.onehot;
        let probs = tape.exp(logp);
        let anchor = match anchors {
            Some(a) => a
                .get(used.len())
                .cloned()
                .ok_or_else(|| Error::Shape("one straight-through anchor per batch".into()))?,
            None => tape.value(probs).clone(),
        };
        let z = tape.straight_through(probs, &sample, &anchor);
        used.push(anchor);
        let recon = bank.decode(&mut tape, i, start, z)?;
        let diff = tape.sub(recon, target);
        let sq = tape.square(diff);
        let recon_rows = tape.sum_cols(sq);
        let kl_groups = tape_kl_uniform_per_group(&mut tape, logp, shape);
        let kl_floor = tape.floor_at(kl_groups, bank.config.free_bits);
        let kl_rows = tape.sum_cols(kl_floor);
        let kl_w = tape.scale(kl_rows, beta);
        let per_row = tape.add(recon_rows, kl_w);
        let term = tape.mean_all(per_row);
        terms.push(term);

        let recon_mean = tape.value(recon_rows).sum() / n as f64;
        let kl_raw = tape.value(kl_groups).sum() / n as f64;
        report.elbo += recon_mean + beta * kl_raw;
        report.groups[i] = Some(GroupStats {
            count: n,
            recon: recon_mean,
            kl: kl_raw,
        });
    }
    if terms.is_empty() {
        debug!("skill ELBO: every resolution group is empty, skipping update");
        return Ok((report, used));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    report.loss = tape.value(total).item();
    if !report.loss.is_finite() {
        return Err(Error::NonFinite("skill ELBO".into()));
    }
    tape.backward(total, &mut bank.params);
    Ok((report, used))
}

/// Minimum reconstruction error of `s_t` from `s_0` over the finite
/// resolutions, one value per row. A bank with only the infinite resolution
/// falls back to its unconditional reconstruction error.
pub fn exploratory_rewards<R: Rng + ?Sized>(
    bank: &SkillBank,
    s0: &Matrix,
    st: &Matrix,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut heads: Vec<usize> = bank.resolutions.finite_indices().collect();
    if heads.is_empty() {
        heads.extend(bank.resolutions.infinite_index());
    }
    let mut best = vec![f64::INFINITY; st.rows()];
    for (&i, post) in heads.iter().zip(bank.posteriors(&heads, s0, st)?) {
        let z = post.sample(rng)?.onehot;
        let recon = bank.decode_values(i, s0, &z)?;
        for (b, e) in best.iter_mut().zip(row_sq_dist(st, &recon)) {
            *b = b.min(e);
        }
    }
    Ok(best)
}

pub fn exploratory_reward<R: Rng + ?Sized>(bank: &SkillBank, s0: &[f64], st: &[f64], rng: &mut R) -> Result<f64> {
    let r = exploratory_rewards(
        bank,
        &Matrix::row_vector(s0.to_vec()),
        &Matrix::row_vector(st.to_vec()),
        rng,
    )?;
    Ok(r[0])
}
