//! Deterministic linear-dynamics trajectories for exercising the skill bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{extract_pairs, PairBatch, ResolutionSet};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearDynamics {
    /// Rotation per step of each 2-D block.
    pub angles: Vec<f64>,
    /// Per-step radial growth.
    pub growth: f64,
}

impl Default for LinearDynamics {
    fn default() -> Self {
        LinearDynamics {
            angles: vec![0.05, 0.11],
            growth: 1.01,
        }
    }
}

impl LinearDynamics {
    pub fn dim(&self) -> usize {
        2 * self.angles.len()
    }

    pub fn step(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; s.len()];
        for (b, &a) in self.angles.iter().enumerate() {
            let (sin, cos) = a.sin_cos();
            let (x, y) = (s[2 * b], s[2 * b + 1]);
            out[2 * b] = self.growth * (cos * x - sin * y);
            out[2 * b + 1] = self.growth * (sin * x + cos * y);
        }
        out
    }

    /// `count` trajectories of `len` states from random starts with block
    /// radii in `[0.5, 1.5]`.
    pub fn trajectories(&self, count: usize, len: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut s: Vec<f64> = (0..self.angles.len())
                    .flat_map(|_| {
                        let r = rng.random_range(0.5..1.5);
                        let phi = rng.random_range(0.0..std::f64::consts::TAU);
                        [r * phi.cos(), r * phi.sin()]
                    })
                    .collect();
                (0..len)
                    .map(|_| {
                        let cur = s.clone();
                        s = self.step(&s);
                        cur
                    })
                    .collect()
            })
            .collect()
    }
}

/// One batch per resolution built from every pair in `trajectories`.
pub fn pair_batches(trajectories: &[Vec<Vec<f64>>], resolutions: &ResolutionSet, dim: usize) -> Result<Vec<PairBatch>> {
    (0..resolutions.len())
        .map(|i| {
            let pairs: Vec<_> = trajectories
                .iter()
                .flat_map(|t| extract_pairs(t, resolutions, i))
                .collect();
            let mut b = super::batch_from_pairs(&pairs, dim)?;
            b.resolution = i;
            Ok(b)
        })
        .collect()
}
