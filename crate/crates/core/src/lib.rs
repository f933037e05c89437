//! Guided decoding that fuses several expert models by gradient-optimizing a
//! language model's key/value context cache at inference time.

pub mod decoding;
pub mod error;
pub mod experts;
pub mod guidance;
pub mod metrics;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
