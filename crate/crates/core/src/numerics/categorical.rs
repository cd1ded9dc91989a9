//! Mixtures of independent categoricals (`groups x classes`), the latent
//! family used for skills, the skill prior, and the manager's heads.

use rand::Rng;

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LatentShape {
    pub groups: usize,
    pub classes: usize,
}

impl LatentShape {
    pub const fn new(groups: usize, classes: usize) -> Self {
        LatentShape { groups, classes }
    }

    /// Width of the concatenated one-hot vector.
    pub const fn dim(&self) -> usize {
        self.groups * self.classes
    }

    /// Largest achievable entropy, reached by the uniform mixture.
    pub fn max_entropy(&self) -> f64 {
        self.groups as f64 * (self.classes as f64).ln()
    }
}

impl Default for LatentShape {
    fn default() -> Self {
        LatentShape::new(8, 8)
    }
}

/// A batch of categorical mixtures given by logits, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct CatMixture {
    pub shape: LatentShape,
    pub logits: Matrix,
}

/// A sampled latent: concatenated one-hots plus its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillLatent {
    pub onehot: Matrix,
    pub log_prob: Vec<f64>,
}

fn log_softmax_rows(logits: &Matrix, classes: usize) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        for g in out.row_mut(r).chunks_mut(classes) {
            let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + g.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            g.iter_mut().for_each(|v| *v -= lse);
        }
    }
    out
}

impl CatMixture {
    pub fn new(shape: LatentShape, logits: Matrix) -> Result<Self> {
        if logits.cols() != shape.dim() {
            return Err(Error::Shape(format!(
                "logits have {} columns, mixture needs {}",
                logits.cols(),
                shape.dim()
            )));
        }
        Ok(CatMixture { shape, logits })
    }

    /// The uniform mixture (all-zero logits), i.e. the skill prior.
    pub fn uniform(shape: LatentShape, rows: usize) -> Self {
        CatMixture {
            shape,
            logits: Matrix::zeros(rows, shape.dim()),
        }
    }

    pub fn rows(&self) -> usize {
        self.logits.rows()
    }

    pub fn log_probs(&self) -> Matrix {
        log_softmax_rows(&self.logits, self.shape.classes)
    }

    pub fn probs(&self) -> Matrix {
        self.log_probs().map(f64::exp)
    }

    /// Draws one class per group per row.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SkillLatent> {
        if !self.logits.is_finite() {
            return Err(Error::NonFinite("categorical logits".into()));
        }
        let probs = self.probs();
        let c = self.shape.classes;
        let mut onehot = Matrix::zeros(self.rows(), self.shape.dim());
        for r in 0..self.rows() {
            for g in 0..self.shape.groups {
                let p = &probs.row(r)[g * c..(g + 1) * c];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = None;
                for (k, &pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        pick = Some(k);
                        break;
                    }
                }
                // Rounding can leave the cumulative sum a hair below u.
                let k = pick.unwrap_or_else(|| p.iter().rposition(|&v| v > 0.0).unwrap_or(c - 1));
                onehot.set(r, g * c + k, 1.0);
            }
        }
        let log_prob = self.log_prob(&onehot);
        Ok(SkillLatent { onehot, log_prob })
    }

    /// Most likely class in every group.
    pub fn mode(&self) -> Matrix {
        let c = self.shape.classes;
        let mut onehot = Matrix::zeros(self.rows(), self.shape.dim());
        for r in 0..self.rows() {
            for g in 0..self.shape.groups {
                let row = &self.logits.row(r)[g * c..(g + 1) * c];
                let k = argmax(row);
                onehot.set(r, g * c + k, 1.0);
            }
        }
        onehot
    }

    pub fn log_prob(&self, onehot: &Matrix) -> Vec<f64> {
        let lp = self.log_probs();
        (0..self.rows())
            .map(|r| {
                lp.row(r)
                    .iter()
                    .zip(onehot.row(r))
                    .filter(|(_, &o)| o != 0.0)
                    .map(|(l, o)| l * o)
                    .sum()
            })
            .collect()
    }

    /// Summed per-group Shannon entropy (nats), one value per row.
    pub fn entropy(&self) -> Vec<f64> {
        let lp = self.log_probs();
        (0..self.rows())
            .map(|r| {
                -lp.row(r)
                    .iter()
                    .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l })
                    .sum::<f64>()
            })
            .collect()
    }

    /// `KL[self || other]` summed over groups, one value per row.
    pub fn kl(&self, other: &CatMixture) -> Result<Vec<f64>> {
        if self.shape != other.shape || self.rows() != other.rows() {
            return Err(Error::Shape(format!(
                "KL between {:?}x{} and {:?}x{}",
                self.shape,
                self.rows(),
                other.shape,
                other.rows()
            )));
        }
        let (lp, lq) = (self.log_probs(), other.log_probs());
        Ok((0..self.rows())
            .map(|r| {
                lp.row(r)
                    .iter()
                    .zip(lq.row(r))
                    .map(|(&a, &b)| {
                        let p = a.exp();
                        if p == 0.0 {
                            0.0
                        } else {
                            p * (a - b)
                        }
                    })
                    .sum::<f64>()
                    .max(0.0)
            })
            .collect())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Samples a latent from `dist`.
pub fn cat_mixture_sample<R: Rng + ?Sized>(dist: &CatMixture, rng: &mut R) -> Result<SkillLatent> {
    dist.sample(rng)
}

/// Total `KL[p || q]` over every row and group.
pub fn kl_categorical(p: &CatMixture, q: &CatMixture) -> Result<f64> {
    Ok(p.kl(q)?.iter().sum())
}

/// Total entropy over every row and group.
pub fn entropy_categorical(p: &CatMixture) -> f64 {
    p.entropy().iter().sum()
}

// Tape-level versions used inside differentiable losses.

pub fn tape_log_softmax(tape: &mut Tape, logits: Var, shape: LatentShape) -> Var {
    tape.group_log_softmax(logits, shape.classes)
}

/// Entropy per row (`[R,1]`) from group log-probabilities.
pub fn tape_entropy(tape: &mut Tape, logp: Var) -> Var {
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp);
    let s = tape.sum_cols(plogp);
    tape.scale(s, -1.0)
}

/// Per-group KL against the uniform prior, `[R, groups]`.
pub fn tape_kl_uniform_per_group(tape: &mut Tape, logp: Var, shape: LatentShape) -> Var {
    let p = tape.exp(logp);
    let shifted = tape.add_scalar(logp, (shape.classes as f64).ln());
    let terms = tape.mul(p, shifted);
    let mut pool = Matrix::zeros(shape.dim(), shape.groups);
    for g in 0..shape.groups {
        for c in 0..shape.classes {
            pool.set(g * shape.classes + c, g, 1.0);
        }
    }
    let pool = tape.constant(pool);
    tape.matmul(terms, pool)
}

/// Log-probability of a fixed one-hot sample, `[R,1]`.
pub fn tape_log_prob(tape: &mut Tape, logp: Var, onehot: &Matrix) -> Var {
    let oh = tape.constant(onehot.clone());
    let picked = tape.mul(logp, oh);
    tape.sum_cols(picked)
}

/// Straight-through sample: forward equals `onehot`, backward flows into the
/// softmax probabilities.
pub fn tape_straight_through(tape: &mut Tape, logp: Var, onehot: &Matrix) -> Var {
    let p = tape.exp(logp);
    let anchor = tape.value(p).clone();
    tape.straight_through(p, onehot, &anchor)
}
