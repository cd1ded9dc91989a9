//! A three-cell-wide corridor: east, a 90° turn north, a 90° turn back east.

use std::collections::BTreeMap;

use super::grid::{features, Body, Grid, V_MAX};
use super::{check_action, EnvSnapshot, Environment, StepResult};
use crate::error::{Error, Result};

pub const LEG1: f64 = 40.0;
pub const LEG2: f64 = 12.0;
pub const LEG3: f64 = 40.0;
pub const DEFAULT_EPISODE: usize = 400;
pub const WALL_PENALTY: f64 = 0.05;
/// Largest displacement in one step (both axes at terminal speed).
pub const MAX_SPEED: f64 = V_MAX * std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub struct Corridor {
    grid: Grid,
    body: Body,
    t: usize,
    done: bool,
    episode_length: usize,
}

fn build_grid() -> Grid {
    // Cell c covers x in [c - 1.5, c - 0.5), so the centerline y = 0 runs
    // through the middle of rows 0..3 and the start (0, 0) is a cell center.
    let w = (LEG1 + LEG3) as usize + 3;
    let h = LEG2 as usize + 3;
    let mut g = Grid::new(w, h, [-1.5, -1.5]);
    let turn = LEG1 as usize;
    g.fill_rect(0..turn + 3, 0..3);
    g.fill_rect(turn..turn + 3, 0..h);
    g.fill_rect(turn..w, h - 3..h);
    g
}

/// Unit direction of travel along the centerline at `p`. Corner squares use
/// the diagonal so progress stays continuous through the turns.
pub fn centerline_direction(p: [f64; 2]) -> [f64; 2] {
    let d = std::f64::consts::FRAC_1_SQRT_2;
    if p[0] < LEG1 - 1.5 || p[0] >= LEG1 + 1.5 {
        [1.0, 0.0]
    } else if p[1] < 1.5 || p[1] >= LEG2 - 1.5 {
        [d, d]
    } else {
        [0.0, 1.0]
    }
}

/// Arc-length position of the nearest centerline point (diagnostic only).
pub fn centerline_progress(p: [f64; 2]) -> f64 {
    let segs = [
        ([0.0, 0.0], [LEG1, 0.0]),
        ([LEG1, 0.0], [LEG1, LEG2]),
        ([LEG1, LEG2], [LEG1 + LEG3, LEG2]),
    ];
    let mut best = (f64::INFINITY, 0.0);
    let mut base = 0.0;
    for (a, b) in segs {
        let len = ((b[0] - a[0]) as f64).hypot(b[1] - a[1]);
        let u = (((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len))
            .clamp(0.0, 1.0);
        let q = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
        let d = (p[0] - q[0]).hypot(p[1] - q[1]);
        if d < best.0 {
            best = (d, base + u * len);
        }
        base += len;
    }
    best.1
}

impl Corridor {
    pub fn new(episode_length: Option<usize>) -> Self {
        Corridor {
            grid: build_grid(),
            body: Body::at([0.0, 0.0]),
            t: 0,
            done: false,
            episode_length: episode_length.unwrap_or(DEFAULT_EPISODE),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Places the agent at rest at `pos` (tests and diagnostics).
    pub fn place(&mut self, pos: [f64; 2]) {
        self.body = Body::at(pos);
    }
}

impl Environment for Corridor {
    fn id(&self) -> &'static str {
        "corridor"
    }

    fn episode_length(&self) -> usize {
        self.episode_length
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.body = Body::at([0.0, 0.0]);
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("corridor: step after episode end; call reset".into()));
        }
        let a = check_action(action)?;
        let before = self.body.pos;
        let dir = centerline_direction(before);
        let contact = self.body.step(&self.grid, a);
        let after = self.body.pos;
        let progress = (after[0] - before[0]) * dir[0] + (after[1] - before[1]) * dir[1];
        let penalty = if contact { WALL_PENALTY } else { 0.0 };
        let reward = (progress - penalty).clamp(-MAX_SPEED, MAX_SPEED);
        self.t += 1;
        self.done = self.t >= self.episode_length;
        let mut info = BTreeMap::new();
        info.insert("wall_contact".to_string(), f64::from(u8::from(contact)));
        info.insert("progress".to_string(), centerline_progress(after));
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done: self.done,
            info,
        })
    }

    fn observe(&self) -> Vec<f64> {
        features(&self.grid, &self.body)
    }

    fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            body: self.body,
            t: self.t,
            done: self.done,
        }
    }

    fn restore(&mut self, s: &EnvSnapshot) {
        self.body = s.body;
        self.t = s.t;
        self.done = s.done;
    }

    fn body(&self) -> Body {
        self.body
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
