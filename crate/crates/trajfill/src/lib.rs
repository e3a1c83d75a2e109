//! Reconstruction of hidden visits in sparse mobility trajectories.
//!
//! A user-day is treated as a sequence of location tokens with time
//! encodings, prefixed by background context (demographics, anchor points,
//! day type). Random subsets of the visits are masked and a bidirectional
//! transformer encoder is trained to predict them; at inference the same
//! machinery fills the hours a sparse observation process never recorded.
//!
//! The crate ships the full loop: a synthetic world generator with known
//! ground truth ([`synth`]), CDR-like and GPS-like sparsification, the
//! encoder and training stack ([`encoder`], [`train`]), Markov-chain and
//! KNN reference predictors ([`baselines`]), and a top-k evaluation harness
//! with context-feature ablations ([`eval`]). See the `examples/` directory
//! for one runnable walkthrough per capability, and the `trajfill` binary
//! for the file-based pipeline (`synth`, `train`, `eval`, `ablate`,
//! `reconstruct`, `gradcheck`).

pub mod baselines;
pub mod config;
pub mod data;
pub mod date;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geo;
pub mod linalg;
pub mod mask;
pub mod model;
pub mod rng;
pub mod runner;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
