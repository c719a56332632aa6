//! Energy-based causal representation transfer (ECRT) for imbalanced
//! classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays, reverse-mode autodiff and Adam.
//! - [`nets`]: MLPs, MADE-masked layers and the two contrastive critics.
//! - [`flow`]: the masked autoregressive flow used as de-mixing function.
//! - [`objectives`]: classification, GCL, FDV, likelihood-regularised and
//!   augmented refinement losses.
//! - [`augment`]: source-space augmentation.
//! - [`data`]: toy generators, MNIST ingestion, imbalance and binning.
//! - [`metrics`]: NLL, top-k, F1, MMD and decorrelation.
//! - [`pipeline`]: the four training stages, run variants and checkpoints.

pub mod augment;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
