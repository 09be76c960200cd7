//! Multi-subject neural decoding with a subject-token transformer encoder.
//!
//! The encoder carries a learnable low-level and high-level token per
//! subject; every other parameter is shared. Token representations are
//! aligned with the similarity structure of precomputed stimulus features
//! and fed to a multi-label classifier.

pub mod cli;
pub mod diff;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod neuro;
pub mod objectives;
pub mod stimfeat;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
