//! Lexically constrained neural machine translation.
//!
//! Constraint pairs are vectorized into extra attention keys and values for
//! every encoder self-attention and decoder cross-attention layer, and a
//! gated plug-in distribution over constraint tokens is mixed into the
//! output layer. The crate also carries the data pipeline, a training loop
//! with a two-stage schedule, plain and bank-allocated constrained beam
//! search, and evaluation metrics.

pub mod cli;
pub mod constraints;
pub mod datapipe;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
