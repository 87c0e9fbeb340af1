//! Cross-modal fusion of multi-scale feature sources.
//!
//! The pipeline aggregates a bag of fine-scale instance features into one
//! vector with sparse multi-instance pooling ([`smil`]), lets that vector
//! attend over the token features of the two coarse-scale modalities
//! ([`cmsa`]), and classifies the concatenation ([`model`]). Training uses a
//! small tape-based autodiff engine ([`diffcore`]); [`datagen`], [`metrics`]
//! and [`harness`] provide synthetic data, evaluation and the experiment
//! runner behind the `cmus` CLI.

pub mod cmsa;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod smil;

pub use diffcore::{Tape, Tensor, Var};
pub use error::{CmusError, Result};
