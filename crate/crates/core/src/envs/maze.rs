//! Multi-room maze with a single sparse reward at the goal.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::{features, Body, Grid};
use super::{check_action, EnvSnapshot, Environment, StepResult};
use crate::error::{Error, Result};

pub const DEFAULT_EPISODE: usize = 500;
const DEFAULT_LAYOUT: &str = include_str!("../../assets/maze6x6.txt");
/// Start positions keep this distance from the start cell's edges.
const START_MARGIN: f64 = 0.1;

/// A parsed text grid: `#` wall, `.` floor, `S` start (exactly one),
/// `G` goal (one or more).
#[derive(Clone, Debug, PartialEq)]
pub struct MazeLayout {
    pub grid: Grid,
    pub start: (usize, usize),
    pub goal: Vec<(usize, usize)>,
}

impl MazeLayout {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.iter().map(|r| r.chars().count()).max().unwrap_or(0);
        if height == 0 || width == 0 {
            return Err(Error::Config("maze layout is empty".into()));
        }
        let mut grid = Grid::new(width, height, [0.0, 0.0]);
        let mut start = Vec::new();
        let mut goal = Vec::new();
        for (r, line) in rows.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' | ' ' => {}
                    '.' => grid.set(c, r, true),
                    'S' => {
                        grid.set(c, r, true);
                        start.push((c, r));
                    }
                    'G' => {
                        grid.set(c, r, true);
                        goal.push((c, r));
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "maze layout: unexpected character {other:?} at row {r}, column {c}"
                        )))
                    }
                }
            }
        }
        if start.len() != 1 {
            return Err(Error::Config(format!(
                "maze layout needs exactly one start cell, found {}",
                start.len()
            )));
        }
        if goal.is_empty() {
            return Err(Error::Config("maze layout has no goal cell".into()));
        }
        Ok(MazeLayout {
            grid,
            start: start[0],
            goal,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_layout() -> Self {
        Self::parse(DEFAULT_LAYOUT).expect("bundled maze layout parses")
    }

    pub fn in_goal(&self, p: [f64; 2]) -> bool {
        let (c, r) = self.grid.cell_of(p);
        self.goal
            .iter()
            .any(|&(gc, gr)| gc as i64 == c && gr as i64 == r)
    }

    pub fn in_start_cell(&self, p: [f64; 2]) -> bool {
        self.grid.cell_of(p) == (self.start.0 as i64, self.start.1 as i64)
    }
}

#[derive(Clone, Debug)]
pub struct Maze {
    layout: MazeLayout,
    body: Body,
    t: usize,
    done: bool,
    episode_length: usize,
}

impl Maze {
    pub fn new(layout: MazeLayout, episode_length: Option<usize>) -> Self {
        let corner = layout.grid.cell_corner(layout.start.0, layout.start.1);
        Maze {
            body: Body::at([corner[0] + 0.5, corner[1] + 0.5]),
            layout,
            t: 0,
            done: false,
            episode_length: episode_length.unwrap_or(DEFAULT_EPISODE),
        }
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    /// Places the agent at rest at `pos` (tests and diagnostics).
    pub fn place(&mut self, pos: [f64; 2]) {
        self.body = Body::at(pos);
    }
}

impl Environment for Maze {
    fn id(&self) -> &'static str {
        "maze"
    }

    fn episode_length(&self) -> usize {
        self.episode_length
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corner = self.layout.grid.cell_corner(self.layout.start.0, self.layout.start.1);
        let span = 1.0 - 2.0 * START_MARGIN;
        let pos = [
            corner[0] + START_MARGIN + span * rng.random::<f64>(),
            corner[1] + START_MARGIN + span * rng.random::<f64>(),
        ];
        self.body = Body::at(pos);
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("maze: step after episode end; call reset".into()));
        }
        let a = check_action(action)?;
        let was_in_goal = self.layout.in_goal(self.body.pos);
        let contact = self.body.step(&self.layout.grid, a);
        let success = was_in_goal || self.layout.in_goal(self.body.pos);
        self.t += 1;
        self.done = success || self.t >= self.episode_length;
        let mut info = BTreeMap::new();
        info.insert("wall_contact".to_string(), f64::from(u8::from(contact)));
        info.insert("success".to_string(), f64::from(u8::from(success)));
        Ok(StepResult {
            obs: self.observe(),
            reward: if success { 1.0 } else { 0.0 },
            done: self.done,
            info,
        })
    }

    fn observe(&self) -> Vec<f64> {
        features(&self.layout.grid, &self.body)
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_observation() {
        let mut a = Maze::new(MazeLayout::default_layout(), None);
        let mut b = Maze::new(MazeLayout::default_layout(), None);
        assert_eq!(a.reset(42), b.reset(42));
    }

    #[test]
    fn starts_lie_inside_start_cell() {
        let mut m = Maze::new(MazeLayout::default_layout(), None);
        let mut distinct = std::collections::BTreeSet::new();
        for seed in 0..100 {
            m.reset(seed);
            assert!(m.layout.in_start_cell(m.body.pos), "seed {seed}: {:?}", m.body.pos);
            distinct.insert(m.body.pos[0].to_bits());
        }
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn agent_in_goal_is_rewarded_and_done() {
        let mut m = Maze::new(MazeLayout::default_layout(), None);
        m.reset(0);
        let (c, r) = m.layout.goal[0];
        m.place([c as f64 + 0.5, r as f64 + 0.5]);
        let s = m.step(&[-1.0, 1.0]).unwrap();
        assert_eq!(s.reward, 1.0);
        assert!(s.done);
        assert!(matches!(m.step(&[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn parse_rejects_bad_layouts() {
        assert!(MazeLayout::parse("#S#\n#.#").is_err());
        assert!(MazeLayout::parse("#SG#\n#S.#").is_err());
        assert!(MazeLayout::parse("#SGx").is_err());
        let l = MazeLayout::parse("####\n#SG#\n####").unwrap();
        assert_eq!(l.start, (1, 1));
        assert_eq!(l.goal, vec![(2, 1)]);
    }

    #[test]
    fn rewards_are_binary_and_walls_hold() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = Maze::new(MazeLayout::default_layout(), None);
        for ep in 0..20 {
            m.reset(ep);
            let mut a = [0.0, 0.0];
            while !m.done {
                if rng.random::<f64>() < 0.1 {
                    a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                }
                let s = m.step(&a).unwrap();
                assert!(s.reward == 0.0 || s.reward == 1.0);
                assert!(m.layout.grid.is_walkable(m.body.pos));
            }
        }
    }
}
