//! Decoding-time political debiasing of a small autoregressive language model.
//!
//! The crate trains a causal transformer on a planted-bias corpus, measures
//! how its generations lean with an independent judge classifier, and
//! calibrates decoding one token at a time by optimizing a hidden-state
//! perturbation against a debias reward under an adaptive KL constraint.

pub mod calibration;
pub mod checkpoint;
pub mod corpus;
mod error;
pub mod judge;
pub mod lm;
pub mod metrics;
pub mod pipeline;
pub mod seed;

pub use error::{DebiasError, Result};
