//! Self-supervised pre-training for time-series Transformers.
//!
//! Series are cut into lookback windows, normalized per instance and split
//! into patches. A causal encoder summarizes the patches before each
//! position and a denoising decoder reconstructs the noised patch at that
//! position. The pre-trained embedding and encoder are then fine-tuned
//! with a forecasting or classification head.
//!
//! The guide in `book/` walks through each stage; its code blocks run as
//! doctests of this crate.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod patch;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/patches.md")]
    struct Patches;
    #[doc = include_str!("../../../book/src/masks.md")]
    struct Masks;
    #[doc = include_str!("../../../book/src/diffusion.md")]
    struct Diffusion;
    #[doc = include_str!("../../../book/src/pretraining.md")]
    struct Pretraining;
    #[doc = include_str!("../../../book/src/finetuning.md")]
    struct Finetuning;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    struct Synthetic;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/testing.md")]
    struct Testing;
}
