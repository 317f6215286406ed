//! Fake quantizers with learnable weight clipping (LWC) and learnable
//! equivalent transformations (LET).

mod config;
mod let_transform;
mod lwc;
mod quantizer;

pub use config::{ActBits, GroupSize, QuantConfig};
pub use let_transform::{
    hier_let_token_scale, let_transform, HierLetState, LetOutputs, LetParams, LetVars,
};
pub use lwc::{lwc_init, LwcInit, LwcParams, LwcVars, DEFAULT_LWC_LOGIT};
pub use quantizer::{
    fake_quantize, fake_quantize_tensor, quantize_activations, quantize_with_range, MIN_STEP,
};
