//! Joint intent detection and slot filling with virtual adversarial training
//! and entropy-based active learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`tape`]: eager reverse-mode differentiation over `f64` matrices.
//! - [`corpus`]: three-file datasets, vocabularies, word vectors, regime sampling.
//! - [`model`]: attention-based BiLSTM encoder with intent and slot decoders.
//! - [`vat`]: per-head KL divergences, adversarial perturbations, the VAT loss.
//! - [`active`]: entropy confidences, percentile-normalised joint confidence, query selection.
//! - [`train`]: supervised losses, the optimisation loop, evaluation.

pub mod active;
pub mod checkpoint;
pub mod config;
pub mod corpus;
mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tape;
pub mod train;
pub mod vat;

pub use error::{Error, Result};
