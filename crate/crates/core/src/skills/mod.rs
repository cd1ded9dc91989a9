//! Multi-resolution skill CVAEs: resolution sets, transition pairs, the
//! shared-trunk skill bank, its summed ELBO, and the exploratory reward.

pub mod bank;
pub mod synthetic;

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use bank::{
    cvae_forward, exploratory_reward, exploratory_rewards, skill_elbo_loss, skill_elbo_loss_anchored, CvaeOutput, ElboReport,
    GroupStats, PairBatch, SkillBank, SkillBankConfig,
};

/// How far ahead a skill looks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Horizon {
    Finite(usize),
    /// Unconditional: targets are states on their own.
    Infinite,
}

impl Horizon {
    pub fn is_finite(self) -> bool {
        matches!(self, Horizon::Finite(_))
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(l) => write!(f, "{l}"),
            Horizon::Infinite => write!(f, "inf"),
        }
    }
}

/// Ordered skill horizons plus the manager interval `k`.
///
/// Finite horizons are strictly decreasing multiples of `k`; an infinite
/// horizon may appear once, last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolutionSet {
    horizons: Vec<Horizon>,
    k: usize,
}

impl Default for ResolutionSet {
    fn default() -> Self {
        ResolutionSet::new(
            vec![
                Horizon::Finite(64),
                Horizon::Finite(32),
                Horizon::Finite(16),
                Horizon::Finite(8),
                Horizon::Infinite,
            ],
            8,
        )
        .expect("default resolutions are valid")
    }
}

impl ResolutionSet {
    pub fn new(horizons: Vec<Horizon>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("manager interval K must be positive".into()));
        }
        if horizons.is_empty() {
            return Err(Error::Config("resolution set is empty".into()));
        }
        let mut prev: Option<usize> = None;
        for (i, h) in horizons.iter().enumerate() {
            match *h {
                Horizon::Infinite if i + 1 != horizons.len() => {
                    return Err(Error::Config("the infinite resolution must come last".into()))
                }
                Horizon::Infinite => {}
                Horizon::Finite(l) => {
                    if l == 0 || l % k != 0 {
                        return Err(Error::Config(format!(
                            "skill length {l} is not a positive multiple of K = {k}"
                        )));
                    }
                    if prev.is_some_and(|p| l >= p) {
                        return Err(Error::Config(format!(
                            "skill lengths must strictly decrease, got {l} after {}",
                            prev.unwrap_or_default()
                        )));
                    }
                    prev = Some(l);
                }
            }
        }
        Ok(ResolutionSet { horizons, k })
    }

    /// Parses a comma-separated list such as `64,32,16,8,inf`.
    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let horizons = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "inf" | "∞" | "infinite" => Ok(Horizon::Infinite),
                _ => s
                    .parse()
                    .map(Horizon::Finite)
                    .map_err(|_| Error::Config(format!("bad skill length {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(horizons, k)
    }

    pub fn horizons(&self) -> &[Horizon] {
        &self.horizons
    }

    pub fn get(&self, i: usize) -> Horizon {
        self.horizons[i]
    }

    pub fn len(&self) -> usize {
        self.horizons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.horizons.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn finite_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.horizons[i].is_finite())
    }

    pub fn infinite_index(&self) -> Option<usize> {
        self.horizons.iter().position(|h| *h == Horizon::Infinite)
    }

    /// Longest finite horizon (0 when only the infinite one is present).
    pub fn max_finite(&self) -> usize {
        self.horizons
            .iter()
            .filter_map(|h| match h {
                Horizon::Finite(l) => Some(*l),
                Horizon::Infinite => None,
            })
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for ResolutionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.horizons.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPair {
    /// `None` for the infinite resolution, which sees no start state.
    pub start: Option<Vec<f64>>,
    pub target: Vec<f64>,
    pub resolution: usize,
}

/// Pairs `(s_t, s_{t+l})` from one contiguous trajectory slice.
pub fn extract_pairs(segment: &[Vec<f64>], resolutions: &ResolutionSet, i: usize) -> Vec<TransitionPair> {
    match resolutions.get(i) {
        Horizon::Finite(l) => (0..segment.len().saturating_sub(l))
            .map(|t| TransitionPair {
                start: Some(segment[t].clone()),
                target: segment[t + l].clone(),
                resolution: i,
            })
            .collect(),
        Horizon::Infinite => segment
            .iter()
            .map(|s| TransitionPair {
                start: None,
                target: s.clone(),
                resolution: i,
            })
            .collect(),
    }
}

/// Stacks same-resolution pairs into a training batch.
pub fn batch_from_pairs(pairs: &[TransitionPair], state_dim: usize) -> Result<PairBatch> {
    let resolution = pairs.first().map_or(0, |p| p.resolution);
    let mut start = Matrix::zeros(pairs.len(), state_dim);
    let mut target = Matrix::zeros(pairs.len(), state_dim);
    for (r, p) in pairs.iter().enumerate() {
        if p.resolution != resolution {
            return Err(Error::Shape("pairs from different resolutions in one batch".into()));
        }
        if p.target.len() != state_dim || p.start.as_ref().is_some_and(|s| s.len() != state_dim) {
            return Err(Error::Shape(format!("pair state width differs from {state_dim}")));
        }
        if let Some(s) = &p.start {
            start.row_mut(r).copy_from_slice(s);
        }
        target.row_mut(r).copy_from_slice(&p.target);
    }
    Ok(PairBatch {
        resolution,
        start,
        target,
    })
}
