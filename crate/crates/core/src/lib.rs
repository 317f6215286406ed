//! Block-wise post-training quantization calibration for a toy decoder
//! transformer, with mean-squared-error, sliced-Wasserstein, KL and hybrid
//! objectives.
//!
//! Layout:
//! - [`diffcore`]: `f64` tensors and a define-by-run gradient tape.
//! - [`quant`]: fake quantizers, learnable clipping and equivalent transforms.
//! - [`losses`]: calibration objectives.
//! - [`model`]: the toy transformer and its weight container.
//! - [`corpus`]: synthetic token corpora.
//! - [`calib`]: Adam and the sequential per-block calibration driver.
//! - [`oracle`]: independent reference implementations for testing.

pub mod calib;
pub mod corpus;
pub mod diffcore;
mod error;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod quant;

pub use error::{ContainerError, Error, Phase, Result};
