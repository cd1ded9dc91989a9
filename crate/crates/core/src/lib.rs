//! Multi-resolution skills for hierarchical control at desk scale.

pub mod envs;
pub mod hierarchy;
pub mod error;
pub mod numerics;
pub mod skills;
pub mod toysim;
pub mod trainer;

pub use error::{Error, Result};
