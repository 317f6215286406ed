//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation checks its forward output for NaN/Inf and the tape checks
//! every gradient it propagates, so numerical blow-ups surface as
//! [`Error::NonFinite`](crate::Error::NonFinite) naming the operation.

mod kernels;
pub mod memtrack;
pub mod nn;
mod ops;
mod tape;
mod tensor;

pub use ops::{logit, sigmoid};
pub use tape::{BackwardCtx, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
