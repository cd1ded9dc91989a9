//! Precision and smoothness of short, long, and curvature-switched subgoal
//! horizons for a point agent following a path.

pub mod path;
pub mod sim;

pub use path::{build_path, PathKind, PathSpec, Piece};
pub use sim::{
    path_metrics, simulate_agent, ContextualHorizon, HorizonChoice, HorizonRegistry, HorizonStrategy, LongHorizon,
    ShortHorizon, SimResult, ToyAgentSpec,
};

/// Ticks enough to traverse `path` twice at the agent's speed.
pub fn default_ticks(path: &PathSpec, agent: &ToyAgentSpec) -> usize {
    (2.0 * path.length() / agent.speed).ceil() as usize
}
