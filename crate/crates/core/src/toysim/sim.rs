//! Point agents tracking noisy lookahead subgoals along a path.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::path::PathSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum HorizonChoice {
    Short,
    Long,
}

/// Picks the lookahead for one tick.
pub trait HorizonStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// `proj` is the agent's arc-length position on the path.
    fn choose(&self, agent: &ToyAgentSpec, path: &PathSpec, proj: f64) -> HorizonChoice;
}

pub struct ShortHorizon;

impl HorizonStrategy for ShortHorizon {
    fn name(&self) -> &'static str {
        "short"
    }

    fn choose(&self, _: &ToyAgentSpec, _: &PathSpec, _: f64) -> HorizonChoice {
        HorizonChoice::Short
    }
}

pub struct LongHorizon;

impl HorizonStrategy for LongHorizon {
    fn name(&self) -> &'static str {
        "long"
    }

    fn choose(&self, _: &ToyAgentSpec, _: &PathSpec, _: f64) -> HorizonChoice {
        HorizonChoice::Long
    }
}

/// Short lookahead wherever the path bends near the long lookahead point.
pub struct ContextualHorizon;

impl HorizonStrategy for ContextualHorizon {
    fn name(&self) -> &'static str {
        "contextual"
    }

    fn choose(&self, agent: &ToyAgentSpec, path: &PathSpec, proj: f64) -> HorizonChoice {
        if path.local_curvature(proj + agent.long) > agent.threshold {
            HorizonChoice::Short
        } else {
            HorizonChoice::Long
        }
    }
}

pub struct HorizonRegistry {
    entries: BTreeMap<&'static str, Box<dyn HorizonStrategy>>,
}

impl Default for HorizonRegistry {
    fn default() -> Self {
        let mut r = HorizonRegistry {
            entries: BTreeMap::new(),
        };
        r.register(Box::new(ShortHorizon));
        r.register(Box::new(LongHorizon));
        r.register(Box::new(ContextualHorizon));
        r
    }
}

impl HorizonRegistry {
    pub fn register(&mut self, s: Box<dyn HorizonStrategy>) {
        self.entries.insert(s.name(), s);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<&dyn HorizonStrategy> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown toy agent {name:?} (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyAgentSpec {
    /// A [`HorizonRegistry`] name.
    pub kind: String,
    pub short: f64,
    pub long: f64,
    pub sigma: f64,
    pub speed: f64,
    pub gain: f64,
    /// Local curvature above which the contextual agent looks short.
    pub threshold: f64,
}

impl ToyAgentSpec {
    pub fn new(kind: &str) -> Self {
        ToyAgentSpec {
            kind: kind.to_string(),
            short: 1.0,
            long: 5.0,
            sigma: 0.3,
            speed: 0.25,
            gain: 0.5,
            threshold: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.short > 0.0 && self.long > self.short) {
            return Err(Error::Config("toy agent needs 0 < short < long lookahead".into()));
        }
        if !(self.sigma >= 0.0 && self.speed > 0.0 && self.gain > 0.0) {
            return Err(Error::Config("toy agent needs sigma >= 0, speed > 0, gain > 0".into()));
        }
        Ok(())
    }

    pub fn lookahead(&self, h: HorizonChoice) -> f64 {
        match h {
            HorizonChoice::Short => self.short,
            HorizonChoice::Long => self.long,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    /// Positions after every tick, starting with the initial one.
    pub positions: Vec<[f64; 2]>,
    /// Heading after every tick, starting with the initial one.
    pub headings: Vec<f64>,
    pub subgoals: Vec<[f64; 2]>,
    pub horizons: Vec<HorizonChoice>,
    /// Arc-length projection the horizon was chosen from, per tick.
    pub projections: Vec<f64>,
    pub path_error: f64,
    pub heading_variance: f64,
}

impl SimResult {
    pub fn ticks(&self) -> usize {
        self.horizons.len()
    }

    pub fn short_fraction(&self) -> f64 {
        let n = self.horizons.iter().filter(|&&h| h == HorizonChoice::Short).count();
        n as f64 / self.ticks().max(1) as f64
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Runs one agent from the path start for up to `ticks` ticks, stopping
/// early once a further tick could carry it past the path end. Noise draws
/// come from a stream seeded by `seed` alone, so agents of every kind see
/// the same draws.
pub fn simulate_agent(agent: &ToyAgentSpec, path: &PathSpec, seed: u64, ticks: usize) -> Result<SimResult> {
    if ticks == 0 {
        return Err(Error::Config("simulation needs at least one tick".into()));
    }
    agent.validate()?;
    let registry = HorizonRegistry::default();
    let strategy = registry.get(&agent.kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = path.point(0.0);
    let mut heading = path.heading(0.0);
    let mut proj = 0.0;
    let mut out = SimResult {
        positions: vec![pos],
        headings: vec![heading],
        subgoals: Vec::with_capacity(ticks),
        horizons: Vec::with_capacity(ticks),
        projections: Vec::with_capacity(ticks),
        path_error: 0.0,
        heading_variance: 0.0,
    };
    let end = path.length();
    for _ in 0..ticks {
        // Local search keeps the projection from jumping across the path.
        proj = path.project_within(pos, proj - agent.long, proj + agent.long);
        if proj + agent.speed > end {
            break;
        }
        let h = strategy.choose(agent, path, proj);
        let target = path.point(proj + agent.lookahead(h));
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        let goal = [target[0] + agent.sigma * nx, target[1] + agent.sigma * ny];
        let desired = (goal[1] - pos[1]).atan2(goal[0] - pos[0]);
        heading = wrap(heading + agent.gain * wrap(desired - heading));
        pos = [pos[0] + agent.speed * heading.cos(), pos[1] + agent.speed * heading.sin()];
        out.positions.push(pos);
        out.headings.push(heading);
        out.subgoals.push(goal);
        out.horizons.push(h);
        out.projections.push(proj);
    }
    let (e, v) = path_metrics(&out, path)?;
    out.path_error = e;
    out.heading_variance = v;
    Ok(out)
}

/// Mean distance of the visited positions (after the start) to the path and
/// the circular variance of per-tick heading changes.
pub fn path_metrics(result: &SimResult, path: &PathSpec) -> Result<(f64, f64)> {
    if result.positions.len() < 2 || result.headings.len() != result.positions.len() {
        return Err(Error::Usage("path metrics need at least one simulated tick".into()));
    }
    let visited = &result.positions[1..];
    let error = visited.iter().map(|&p| path.distance(p)).sum::<f64>() / visited.len() as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for w in result.headings.windows(2) {
        let d = wrap(w[1] - w[0]);
        c += d.cos();
        s += d.sin();
    }
    let n = (result.headings.len() - 1) as f64;
    let variance = 1.0 - (c / n).hypot(s / n);
    Ok((error, variance.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toysim::path::{build_path, PathKind};

    #[test]
    fn noiseless_straight_line_has_zero_error() {
        let path = PathSpec::straight(20.0).unwrap();
        for kind in ["short", "long", "contextual"] {
            let mut a = ToyAgentSpec::new(kind);
            a.sigma = 0.0;
            let r = simulate_agent(&a, &path, 0, 200).unwrap();
            assert_eq!(r.path_error, 0.0, "{kind}");
            assert_eq!(r.heading_variance, 0.0, "{kind}");
            assert!(r.ticks() > 70);
        }
    }

    #[test]
    fn offset_trajectory_has_unit_error() {
        let path = PathSpec::straight(10.0).unwrap();
        let r = SimResult {
            positions: vec![[0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [3.0, 1.0]],
            headings: vec![0.0; 4],
            subgoals: vec![],
            horizons: vec![],
            projections: vec![],
            path_error: 0.0,
            heading_variance: 0.0,
        };
        let (e, v) = path_metrics(&r, &path).unwrap();
        assert!((e - 1.0).abs() < 1e-15);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn noiseless_short_tracks_corners_better_than_long() {
        let path = build_path(PathKind::TwoTurn, 1.0).unwrap();
        let run = |k: &str| {
            let mut a = ToyAgentSpec::new(k);
            a.sigma = 0.0;
            simulate_agent(&a, &path, 0, 1000).unwrap().path_error
        };
        assert!(run("short") <= run("long"));
    }

    #[test]
    fn short_jitters_more_than_long_on_a_straight() {
        let path = PathSpec::straight(30.0).unwrap();
        for seed in 0..5 {
            let run = |k: &str| simulate_agent(&ToyAgentSpec::new(k), &path, seed, 1000).unwrap().heading_variance;
            assert!(run("short") > run("long"));
        }
    }

    #[test]
    fn contextual_choice_depends_only_on_geometry() {
        let path = build_path(PathKind::TwoTurn, 1.0).unwrap();
        let a = ToyAgentSpec::new("contextual");
        let r = simulate_agent(&a, &path, 3, 1000).unwrap();
        for (&p, &h) in r.projections.iter().zip(&r.horizons) {
            assert_eq!(h, ContextualHorizon.choose(&a, &path, p));
        }
        assert!(r.horizons.contains(&HorizonChoice::Short) && r.horizons.contains(&HorizonChoice::Long));
    }

    #[test]
    fn unknown_kind_and_bad_specs_fail() {
        let path = PathSpec::straight(5.0).unwrap();
        assert!(simulate_agent(&ToyAgentSpec::new("medium"), &path, 0, 10).is_err());
        assert!(simulate_agent(&ToyAgentSpec::new("short"), &path, 0, 0).is_err());
        let mut a = ToyAgentSpec::new("short");
        a.long = 0.5;
        assert!(simulate_agent(&a, &path, 0, 10).is_err());
    }
}
