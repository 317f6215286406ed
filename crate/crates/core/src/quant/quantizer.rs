use super::config::QuantConfig;
use super::lwc::LwcVars;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound on the quantization step, so constant groups do not divide
/// by zero.
pub const MIN_STEP: f64 = 1e-8;

fn levels(bits: u8) -> Result<f64> {
    if bits == 0 {
        return Err(Error::Config("quantizer needs at least one bit".into()));
    }
    Ok(((1u32 << bits) - 1) as f64)
}

/// Uniform affine fake quantization of `[G×g]` groups onto `2^bits` levels
/// spanning `[lo, hi]` (one bound per group, shape `[G]`).
///
/// `q = clamp(round((x − lo) / step), 0, 2^bits − 1)`, returned as
/// `lo + q·step`. Rounding uses the straight-through rule, so gradients
/// reach `x`, `lo` and `hi`.
pub fn quantize_with_range<'t>(x: Var<'t>, lo: Var<'t>, hi: Var<'t>, bits: u8) -> Result<Var<'t>> {
    let qmax = levels(bits)?;
    let shape = x.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::Config(format!("quantizer expects non-empty [G×g] groups, got {shape:?}")));
    }
    let groups = shape[0];
    if lo.shape() != [groups] || hi.shape() != [groups] {
        return Err(Error::Shape(format!(
            "clip bounds must have shape [{groups}], got {:?} and {:?}",
            lo.shape(),
            hi.shape()
        )));
    }
    let lo = lo.reshape(&[groups, 1])?;
    let hi = hi.reshape(&[groups, 1])?;
    let step = hi.sub(lo)?.mul_scalar(1.0 / qmax)?.clamp_min(MIN_STEP)?;
    let q = x.sub(lo)?.div(step)?.round_ste()?.clamp(0.0, qmax)?;
    q.mul(step)?.add(lo)
}

/// Fake-quantizes `x` with learnable clipping.
///
/// Groups run along the last axis of `x` as laid out by
/// [`QuantConfig::group_len`]. For group `k` the asymmetric clip range is
/// `[σ(β_k)·min(x_k), σ(γ_k)·max(x_k)]`; in symmetric mode it is
/// `±σ(γ_k)·max|x_k|`.
pub fn fake_quantize<'t>(x: Var<'t>, cfg: &QuantConfig, lwc: &LwcVars<'t>) -> Result<Var<'t>> {
    cfg.validate()?;
    let shape = x.shape();
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return Err(Error::Config("cannot quantize an empty tensor".into()));
    }
    let axis_len = *shape.last().ok_or_else(|| Error::Config("cannot quantize a scalar".into()))?;
    let g = cfg.group_len(axis_len, numel)?;
    let groups = numel / g;
    if lwc.gamma_raw.shape() != [groups] || lwc.beta_raw.shape() != [groups] {
        return Err(Error::Shape(format!(
            "clipping logits must have shape [{groups}], got {:?} / {:?}",
            lwc.gamma_raw.shape(),
            lwc.beta_raw.shape()
        )));
    }
    let xg = x.reshape(&[groups, g])?;
    let up = lwc.gamma_raw.sigmoid()?;
    let (lo, hi) = if cfg.symmetric {
        let hi = xg.abs()?.max_last()?.mul(up)?;
        (hi.neg()?, hi)
    } else {
        let down = lwc.beta_raw.sigmoid()?;
        (xg.min_last()?.mul(down)?, xg.max_last()?.mul(up)?)
    };
    quantize_with_range(xg, lo, hi, cfg.weight_bits)?.reshape(&shape)
}

/// Dynamic per-token activation quantizer: each row of `x` is quantized
/// over its own `[min, max]` with no learnable clipping.
pub fn quantize_activations<'t>(x: Var<'t>, bits: u8) -> Result<Var<'t>> {
    let shape = x.shape();
    let (rows, cols): (usize, usize) = match shape.split_last() {
        Some((&c, lead)) if c > 0 => (lead.iter().product(), c),
        _ => return Err(Error::Config(format!("cannot quantize activations of shape {shape:?}"))),
    };
    let xr = x.reshape(&[rows, cols])?;
    let lo = xr.min_last()?;
    let hi = xr.max_last()?;
    quantize_with_range(xr, lo, hi, bits)?.reshape(&shape)
}

/// Untracked convenience: quantize plain values with given clipping logits.
pub fn fake_quantize_tensor(x: &Tensor, cfg: &QuantConfig, lwc: &super::LwcParams) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = lwc.constants(&tape);
    Ok(fake_quantize(tape.constant(x.clone()), cfg, &vars)?.value())
}
