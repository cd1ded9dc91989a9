//! Dense matrices, reverse-mode differentiation, layers, optimizer, and
//! categorical latents.

pub mod adam;
pub mod categorical;
pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use categorical::{
    cat_mixture_sample, entropy_categorical, kl_categorical, CatMixture, LatentShape, SkillLatent,
};
pub use checkpoint::Checkpoint;
pub use matrix::Matrix;
pub use mlp::{Init, Mlp, MlpSpec};
pub use params::{ParamId, ParamSet, Tensor};
pub use tape::{Grads, Tape, Var};
