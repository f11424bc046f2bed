//! Multi-branch CNN-ViT autoencoder for clustering spectrograms rendered at
//! several time-window durations.
//!
//! Each duration gets its own encoder branch; the branches share a CLS
//! token that attends over all of them, and the fused latent code is what
//! gets clustered.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod train;

pub use config::{Activation, BlockKind, FusionMode, ModelConfig, Stage, DURATIONS};
pub use error::{Error, Result};
pub use model::{Ctsae, LossReport, Network};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
