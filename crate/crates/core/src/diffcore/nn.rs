//! Composite and fused layers used by the toy transformer.

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Layer normalisation over the last axis of a 2-D input, with learned
/// gain and shift.
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, shift: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return shape_err(format!("layer_norm expects [N×d], got {shape:?}"));
    }
    let n = shape[0];
    let mean = x.mean_axis(1)?.reshape(&[n, 1])?;
    let centered = x.sub(mean)?;
    let std = x.variance_axis(1)?.add_scalar(eps)?.sqrt()?.reshape(&[n, 1])?;
    centered.div(std)?.mul(gain)?.add(shift)
}

/// Multi-head causal self-attention on row-stacked tokens.
///
/// `q`, `k`, `v` are `[batch·seq × d]` with rows ordered batch-major; heads
/// split `d` into `n_heads` contiguous slices. Position `t` attends to
/// positions `0..=t` of its own sequence.
pub fn causal_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    batch: usize,
    seq: usize,
    n_heads: usize,
) -> Result<Var<'t>> {
    let (qt, kt, vt) = (q.value(), k.value(), v.value());
    let shape = qt.shape().to_vec();
    if shape.len() != 2 || kt.shape() != shape || vt.shape() != shape {
        return shape_err("attention inputs must share one [N×d] shape");
    }
    let (rows, d) = (shape[0], shape[1]);
    if rows != batch * seq || n_heads == 0 || d % n_heads != 0 {
        return shape_err(format!(
            "attention layout batch={batch} seq={seq} heads={n_heads} incompatible with {shape:?}"
        ));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    // probs[(b, h)][i * seq + j], zero above the diagonal
    let mut probs = vec![0.0; batch * n_heads * seq * seq];
    let mut out = vec![0.0; rows * d];
    let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
    for b in 0..batch {
        for h in 0..n_heads {
            let p = &mut probs[(b * n_heads + h) * seq * seq..][..seq * seq];
            let off = h * dh;
            for i in 0..seq {
                let qi = &qd[(b * seq + i) * d + off..][..dh];
                let mut m = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kd[(b * seq + j) * d + off..][..dh];
                    let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    p[i * seq + j] = s;
                    m = m.max(s);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (p[i * seq + j] - m).exp();
                    p[i * seq + j] = e;
                    z += e;
                }
                let oi = &mut out[(b * seq + i) * d + off..][..dh];
                for j in 0..=i {
                    p[i * seq + j] /= z;
                    let w = p[i * seq + j];
                    let vj = &vd[(b * seq + j) * d + off..][..dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    let out = Tensor::new(shape, out)?;
    q.tape.record(
        "causal_attention",
        out,
        &[q, k, v],
        Box::new(move |ctx| {
            let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
            let go = ctx.grad;
            let mut gq = vec![0.0; rows * d];
            let mut gk = vec![0.0; rows * d];
            let mut gv = vec![0.0; rows * d];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..n_heads {
                    let p = &probs[(b * n_heads + h) * seq * seq..][..seq * seq];
                    let off = h * dh;
                    for i in 0..seq {
                        let gi = &go[(b * seq + i) * d + off..][..dh];
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let vj = &vd[(b * seq + j) * d + off..][..dh];
                            dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                            dot += p[i * seq + j] * dp[j];
                            let w = p[i * seq + j];
                            let gvj = &mut gv[(b * seq + j) * d + off..][..dh];
                            for (g, x) in gvj.iter_mut().zip(gi) {
                                *g += w * x;
                            }
                        }
                        let qrow = (b * seq + i) * d + off;
                        for j in 0..=i {
                            let ds = p[i * seq + j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = (b * seq + j) * d + off;
                            for c in 0..dh {
                                gq[qrow + c] += ds * kd[krow + c];
                                gk[krow + c] += ds * qd[qrow + c];
                            }
                        }
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        }),
    )
}

/// Row-wise softmax of plain values (no tape).
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, _) = x.rows_cols();
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..rows {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
