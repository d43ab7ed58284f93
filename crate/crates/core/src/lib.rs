//! Fixed-point inference emulation and quantization-aware fine-tuning for
//! small convolutional networks.

pub mod diagnostics;
pub mod error;
pub mod fixedpoint;
pub mod harness;
pub mod qforward;
pub mod strategies;
pub mod tensornet;

pub use error::{Error, Result};
