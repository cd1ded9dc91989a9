//! Training loop: replay, acting, rollouts, updates, evaluation, checkpoints.

pub mod agent;
pub mod config;
pub mod experiment;
pub mod iteration;
pub mod replay;
pub mod rollout;

pub use agent::{collect_policy_step, Agent, AgentState, PolicyStep};
pub use config::TrainConfig;
pub use experiment::{evaluate, load_agent, run_experiment, EvalResult, EvalState, Experiment, RunSummary};
pub use iteration::{train_iteration, MetricsRecord};
pub use replay::{ReplayBuffer, Segment};
pub use rollout::{abstract_batch, generate_rollout, worker_batch, EnvModel, ModelStep, Rollout, RolloutModel};

/// Independent seed for a named stream of a run (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
