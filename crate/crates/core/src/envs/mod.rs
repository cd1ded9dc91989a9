//! Point-mass navigation tasks: a dense-reward corridor and a sparse maze.

pub mod corridor;
pub mod grid;
pub mod maze;

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};

pub use corridor::Corridor;
pub use grid::{Body, Grid, V_MAX};
pub use maze::{Maze, MazeLayout};

pub const ACTION_DIM: usize = 2;
pub const OBS_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub id: String,
    /// Overrides the env's default episode length.
    pub episode_length: Option<usize>,
    /// Maze layout file; the bundled layout is used when absent.
    pub maze_file: Option<PathBuf>,
}

impl EnvConfig {
    pub fn new(id: impl Into<String>) -> Self {
        EnvConfig {
            id: id.into(),
            episode_length: None,
            maze_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: BTreeMap<String, f64>,
}

/// Full dynamic state of an env, enough to resume stepping from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSnapshot {
    pub body: Body,
    pub t: usize,
    pub done: bool,
}

pub trait Environment: Send {
    fn id(&self) -> &'static str;

    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn episode_length(&self) -> usize;

    /// Starts a new episode; all randomness of an episode is drawn here.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Applies an action (clamped to `[-1, 1]`). Stepping a finished episode
    /// is a usage error.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;

    fn observe(&self) -> Vec<f64>;

    fn snapshot(&self) -> EnvSnapshot;

    fn restore(&mut self, snapshot: &EnvSnapshot);

    fn body(&self) -> Body;

    fn boxed_clone(&self) -> Box<dyn Environment>;
}

pub(crate) fn check_action(action: &[f64]) -> Result<[f64; 2]> {
    match action {
        [x, y] => Ok([*x, *y]),
        _ => Err(Error::Shape(format!(
            "action has {} components, expected {ACTION_DIM}",
            action.len()
        ))),
    }
}

type Constructor = fn(&EnvConfig) -> Result<Box<dyn Environment>>;

/// Env constructors keyed by id.
pub struct EnvRegistry {
    entries: BTreeMap<&'static str, Constructor>,
}

impl Default for EnvRegistry {
    fn default() -> Self {
        let mut r = EnvRegistry {
            entries: BTreeMap::new(),
        };
        r.register("corridor", |c| Ok(Box::new(Corridor::new(c.episode_length))));
        r.register("maze", |c| {
            let layout = match &c.maze_file {
                Some(p) => MazeLayout::from_file(p)?,
                None => MazeLayout::default_layout(),
            };
            Ok(Box::new(Maze::new(layout, c.episode_length)))
        });
        r
    }
}

impl EnvRegistry {
    pub fn register(&mut self, id: &'static str, ctor: Constructor) {
        self.entries.insert(id, ctor);
    }

    pub fn ids(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn make(&self, config: &EnvConfig) -> Result<Box<dyn Environment>> {
        let ctor = self.entries.get(config.id.as_str()).ok_or_else(|| {
            Error::Config(format!(
                "unknown env id {:?} (known: {})",
                config.id,
                self.ids().collect::<Vec<_>>().join(", ")
            ))
        })?;
        ctor(config)
    }
}

/// Builds an env from the default registry.
pub fn make_env(config: &EnvConfig) -> Result<Box<dyn Environment>> {
    EnvRegistry::default().make(config)
}

/// Convenience: construct and reset in one call.
pub fn env_reset(config: &EnvConfig, seed: u64) -> Result<(Box<dyn Environment>, Vec<f64>)> {
    let mut env = make_env(config)?;
    let obs = env.reset(seed);
    Ok((env, obs))
}
