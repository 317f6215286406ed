//! Registry of finite-difference gradient checks over every differentiable
//! primitive, layer and loss.
//!
//! Each check draws a random input away from non-smooth points (sort ties,
//! `abs`/`clamp` kinks), runs one backward pass and compares against
//! [`finite_diff_grad`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_grad, relative_error, FD_STEP};
use crate::diffcore::{nn, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, BlockOutputs, LossSpec, ProjectionSet};
use crate::model::{block_forward, BlockWeights, ModelSpec};
use crate::quant::{hier_let_token_scale, let_transform, HierLetState};

/// Pass threshold on [`relative_error`].
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Analytic gradient of `f` at `x` by one backward pass.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let root = f(v)?;
    tape.backward(root)?;
    Ok(v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Relative error between the analytic and central-difference gradients.
pub fn check_gradient<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let analytic = analytic_grad(&f, x)?;
    let numeric = finite_diff_grad(
        |t| {
            let tape = Tape::new();
            Ok(f(tape.constant(t.clone()))?.item())
        },
        x,
        FD_STEP,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

pub struct GradCheck {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> Result<f64>,
}

impl GradCheck {
    /// Runs the check `trials` times from a seeded stream and returns the
    /// worst relative error.
    pub fn worst_error(&self, trials: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            worst = worst.max((self.run)(&mut rng)?);
        }
        Ok(worst)
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches")
}

/// Uniform values whose magnitudes and pairwise gaps all exceed `margin`.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    loop {
        let t = uniform(rng, shape, -2.0, 2.0);
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        let gaps_ok = v.windows(2).all(|w| w[1] - w[0] > margin);
        let zero_ok = v.iter().all(|x| x.abs() > margin);
        if gaps_ok && zero_ok {
            return t;
        }
    }
}

/// Whether every projected value of `y_q` is at least `margin` away from its
/// sort neighbours and from the matched full-precision value.
fn sw_smooth_at(y_fp: &Tensor, y_q: &Tensor, proj: &ProjectionSet, margin: f64) -> bool {
    let ut = proj.matrix().transpose().expect("2-D");
    let (pf, pq) = (y_fp.matmul(&ut).expect("dims"), y_q.matmul(&ut).expect("dims"));
    let (n, k) = (pf.shape()[0], pf.shape()[1]);
    (0..k).all(|j| {
        let mut a: Vec<f64> = (0..n).map(|i| pf.data()[i * k + j]).collect();
        let mut b: Vec<f64> = (0..n).map(|i| pq.data()[i * k + j]).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        b.windows(2).all(|w| w[1] - w[0] > margin)
            && a.iter().zip(&b).all(|(x, y)| (x - y).abs() > margin)
    })
}

const KINK_MARGIN: f64 = 1e-4;

fn sw_case(rng: &mut ChaCha8Rng, n_proj: usize, n: usize, d: usize) -> (Tensor, Tensor, ProjectionSet) {
    loop {
        let y_fp = uniform(rng, &[n, d], -1.0, 1.0);
        let y_q = uniform(rng, &[n, d], -1.0, 1.0);
        let proj = losses::sample_projections(d, n_proj, rng.random()).expect("valid sizes");
        if sw_smooth_at(&y_fp, &y_q, &proj, KINK_MARGIN) {
            return (y_fp, y_q, proj);
        }
    }
}

fn sw_check(rng: &mut ChaCha8Rng, n_proj: usize) -> Result<f64> {
    let (y_fp, y_q, proj) = sw_case(rng, n_proj, 6, 4);
    check_gradient(
        |q| {
            let b = BlockOutputs::new(q.tape().constant(y_fp.clone()), q)?;
            losses::sliced_wasserstein_loss(&b, &proj)
        },
        &y_q,
    )
}

fn combined_check(rng: &mut ChaCha8Rng, sw_w: f64) -> Result<f64> {
    let (y_fp, y_q, proj) = sw_case(rng, 16, 6, 4);
    let spec = LossSpec {
        sw_w,
        n_proj: 16,
        ..LossSpec::default()
    };
    check_gradient(
        |q| {
            let b = BlockOutputs::new(q.tape().constant(y_fp.clone()), q)?;
            losses::combined_block_loss(&b, &spec, &proj)
        },
        &y_q,
    )
}

/// Weighted sum so every output coordinate gets a distinct cotangent. Uses
/// the leading `numel(y)` entries of `weights`.
fn weighted_sum<'t>(y: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let n = y.numel();
    let w = Tensor::new(y.shape(), weights.data()[..n].to_vec())?;
    y.mul(y.tape().constant(w))?.sum()
}

fn unary_check(
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
    op: for<'t> fn(Var<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let x = uniform(rng, &[3, 4], lo, hi);
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    check_gradient(|v| weighted_sum(op(v)?, &w), &x)
}

fn binary_check(
    rng: &mut ChaCha8Rng,
    other_shape: &[usize],
    other_lo: f64,
    op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let a = uniform(rng, &[3, 4], -2.0, 2.0);
    let b = uniform(rng, other_shape, other_lo, 2.0);
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    // check both operands: first w.r.t. a, then w.r.t. the broadcast b
    let ea = check_gradient(|v| weighted_sum(op(v, v.tape().constant(b.clone()))?, &w), &a)?;
    let eb = check_gradient(|v| weighted_sum(op(v.tape().constant(a.clone()), v)?, &w), &b)?;
    Ok(ea.max(eb))
}

fn toy_block(rng: &mut ChaCha8Rng) -> (ModelSpec, BlockWeights) {
    let spec = ModelSpec {
        vocab_size: 8,
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        ff_mult: 2,
        max_seq_len: 4,
    };
    let block = BlockWeights::random(&spec, rng);
    (spec, block)
}

pub fn registry() -> Vec<GradCheck> {
    vec![
        GradCheck { name: "add", run: |r| binary_check(r, &[4], -2.0, |a, b| a.add(b)) },
        GradCheck { name: "sub", run: |r| binary_check(r, &[3, 1], -2.0, |a, b| a.sub(b)) },
        GradCheck { name: "mul", run: |r| binary_check(r, &[3, 4], -2.0, |a, b| a.mul(b)) },
        GradCheck { name: "div", run: |r| binary_check(r, &[4], 0.5, |a, b| a.div(b)) },
        GradCheck { name: "neg", run: |r| unary_check(r, -2.0, 2.0, |x| x.neg()) },
        GradCheck { name: "add_scalar", run: |r| unary_check(r, -2.0, 2.0, |x| x.add_scalar(0.7)) },
        GradCheck { name: "mul_scalar", run: |r| unary_check(r, -2.0, 2.0, |x| x.mul_scalar(-1.3)) },
        GradCheck {
            name: "abs",
            run: |r| {
                let x = separated(r, &[3, 4], KINK_MARGIN);
                let w = uniform(r, &[3, 4], -1.0, 1.0);
                check_gradient(|v| weighted_sum(v.abs()?, &w), &x)
            },
        },
        GradCheck {
            name: "clamp",
            run: |r| {
                let x = loop {
                    let x = uniform(r, &[3, 4], -2.0, 2.0);
                    if x.data().iter().all(|v| (v.abs() - 1.0).abs() > KINK_MARGIN) {
                        break x;
                    }
                };
                let w = uniform(r, &[3, 4], -1.0, 1.0);
                check_gradient(|v| weighted_sum(v.clamp(-1.0, 1.0)?, &w), &x)
            },
        },
        GradCheck { name: "sigmoid", run: |r| unary_check(r, -4.0, 4.0, |x| x.sigmoid()) },
        GradCheck { name: "exp", run: |r| unary_check(r, -2.0, 2.0, |x| x.exp()) },
        GradCheck { name: "log", run: |r| unary_check(r, 0.2, 3.0, |x| x.log()) },
        GradCheck { name: "sqrt", run: |r| unary_check(r, 0.2, 3.0, |x| x.sqrt()) },
        GradCheck { name: "square", run: |r| unary_check(r, -2.0, 2.0, |x| x.square()) },
        GradCheck { name: "gelu", run: |r| unary_check(r, -3.0, 3.0, |x| x.gelu()) },
        GradCheck { name: "sum", run: |r| unary_check(r, -2.0, 2.0, |x| x.square()?.sum()) },
        GradCheck { name: "mean", run: |r| unary_check(r, -2.0, 2.0, |x| x.square()?.mean()) },
        GradCheck {
            name: "sum_axis",
            run: |r| unary_check(r, -2.0, 2.0, |x| x.square()?.sum_axis(0)?.reshape(&[1, 4])?.exp()),
        },
        GradCheck {
            name: "mean_axis",
            run: |r| unary_check(r, -2.0, 2.0, |x| x.mean_axis(1)?.exp()?.reshape(&[3, 1])?.square()),
        },
        GradCheck {
            name: "variance_axis",
            run: |r| unary_check(r, -2.0, 2.0, |x| x.variance_axis(1)?.sqrt()?.reshape(&[3, 1])),
        },
        GradCheck {
            name: "max_last",
            run: |r| {
                let x = separated(r, &[3, 4], KINK_MARGIN);
                check_gradient(|v| v.max_last()?.square()?.sum(), &x)
            },
        },
        GradCheck {
            name: "min_last",
            run: |r| {
                let x = separated(r, &[3, 4], KINK_MARGIN);
                check_gradient(|v| v.min_last()?.exp()?.sum(), &x)
            },
        },
        GradCheck {
            name: "transpose",
            run: |r| unary_check(r, -2.0, 2.0, |x| x.transpose()?.reshape(&[3, 4])),
        },
        GradCheck {
            name: "matmul",
            run: |r| {
                let a = uniform(r, &[3, 4], -1.0, 1.0);
                let b = uniform(r, &[4, 2], -1.0, 1.0);
                let w = uniform(r, &[3, 2], -1.0, 1.0);
                let ea = check_gradient(|v| weighted_sum(v.matmul(v.tape().constant(b.clone()))?, &w), &a)?;
                let eb = check_gradient(|v| weighted_sum(v.tape().constant(a.clone()).matmul(v)?, &w), &b)?;
                Ok(ea.max(eb))
            },
        },
        GradCheck {
            name: "gather_rows",
            run: |r| {
                let t = uniform(r, &[5, 3], -1.0, 1.0);
                let w = uniform(r, &[4, 3], -1.0, 1.0);
                check_gradient(|v| weighted_sum(v.gather_rows(&[4, 0, 4, 2])?.square()?, &w), &t)
            },
        },
        GradCheck {
            name: "sort",
            run: |r| {
                let x = separated(r, &[7], KINK_MARGIN);
                let w = uniform(r, &[7], -1.0, 1.0);
                check_gradient(|v| weighted_sum(v.sort_with_permutation()?.0.square()?, &w), &x)
            },
        },
        GradCheck {
            name: "sort_last",
            run: |r| {
                let x = separated(r, &[3, 4], KINK_MARGIN);
                let w = uniform(r, &[3, 4], -1.0, 1.0);
                check_gradient(|v| weighted_sum(v.sort_last()?.exp()?, &w), &x)
            },
        },
        GradCheck {
            name: "log_softmax",
            run: |r| unary_check(r, -3.0, 3.0, |x| x.log_softmax_last()),
        },
        GradCheck {
            name: "layer_norm",
            run: |r| {
                let x = uniform(r, &[3, 4], -2.0, 2.0);
                let g = uniform(r, &[4], 0.5, 1.5);
                let b = uniform(r, &[4], -0.5, 0.5);
                let w = uniform(r, &[3, 4], -1.0, 1.0);
                let ex = check_gradient(
                    |v| {
                        let t = v.tape();
                        weighted_sum(nn::layer_norm(v, t.constant(g.clone()), t.constant(b.clone()), 1e-5)?, &w)
                    },
                    &x,
                )?;
                let eg = check_gradient(
                    |v| {
                        let t = v.tape();
                        weighted_sum(nn::layer_norm(t.constant(x.clone()), v, t.constant(b.clone()), 1e-5)?, &w)
                    },
                    &g,
                )?;
                Ok(ex.max(eg))
            },
        },
        GradCheck {
            name: "causal_attention",
            run: |r| {
                let (batch, seq, d) = (2, 3, 4);
                let q = uniform(r, &[batch * seq, d], -1.0, 1.0);
                let k = uniform(r, &[batch * seq, d], -1.0, 1.0);
                let v = uniform(r, &[batch * seq, d], -1.0, 1.0);
                let w = uniform(r, &[batch * seq, d], -1.0, 1.0);
                fn attn<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
                    nn::causal_attention(q, k, v, 2, 3, 2)
                }
                let eq = check_gradient(|x| { let t = x.tape(); weighted_sum(attn(x, t.constant(k.clone()), t.constant(v.clone()))?, &w) }, &q)?;
                let ek = check_gradient(|x| { let t = x.tape(); weighted_sum(attn(t.constant(q.clone()), x, t.constant(v.clone()))?, &w) }, &k)?;
                let ev = check_gradient(|x| { let t = x.tape(); weighted_sum(attn(t.constant(q.clone()), t.constant(k.clone()), x)?, &w) }, &v)?;
                Ok(eq.max(ek).max(ev))
            },
        },
        GradCheck {
            name: "let_transform",
            run: |r| {
                let x = uniform(r, &[3, 4], -1.0, 1.0);
                let wt = uniform(r, &[4, 2], -1.0, 1.0);
                let b = uniform(r, &[2], -1.0, 1.0);
                let delta = uniform(r, &[4], -0.5, 0.5);
                let log_s = uniform(r, &[4], -0.5, 0.5);
                let cot = uniform(r, &[3, 2], -1.0, 1.0);
                // gradient w.r.t. the log-scale through a squared output
                check_gradient(
                    |ls| {
                        let t = ls.tape();
                        let p = crate::quant::LetVars { delta: t.constant(delta.clone()), log_s: ls, s: ls.exp()? };
                        let o = let_transform(t.constant(x.clone()), t.constant(wt.clone()), t.constant(b.clone()), &p)?;
                        let y = o.x.square()?.matmul(o.w)?.add(o.bias)?;
                        weighted_sum(y, &cot)
                    },
                    &log_s,
                )
            },
        },
        GradCheck {
            name: "hier_let_token_scale",
            run: |r| {
                let x = uniform(r, &[3, 5], -2.0, 2.0);
                let w = uniform(r, &[3, 5], -1.0, 1.0);
                check_gradient(|v| weighted_sum(hier_let_token_scale(v, &HierLetState::default())?.0, &w), &x)
            },
        },
        GradCheck {
            name: "mse",
            run: |r| {
                let y_fp = uniform(r, &[5, 3], -1.0, 1.0);
                let y_q = uniform(r, &[5, 3], -1.0, 1.0);
                check_gradient(|q| losses::mse_loss(&BlockOutputs::new(q.tape().constant(y_fp.clone()), q)?), &y_q)
            },
        },
        GradCheck {
            name: "w1_1d",
            run: |r| {
                let (y_fp, y_q, _) = sw_case(r, 1, 7, 1);
                let a = y_fp.reshape(&[7])?;
                let b = y_q.reshape(&[7])?;
                check_gradient(|v| losses::w1_1d(v.tape().constant(a.clone()), v), &b)
            },
        },
        GradCheck { name: "sw_nproj_1", run: |r| sw_check(r, 1) },
        GradCheck { name: "sw_nproj_16", run: |r| sw_check(r, 16) },
        GradCheck { name: "sw_nproj_128", run: |r| sw_check(r, 128) },
        GradCheck {
            name: "kl",
            run: |r| {
                let fp = uniform(r, &[4, 6], -2.0, 2.0);
                let q = uniform(r, &[4, 6], -2.0, 2.0);
                check_gradient(|v| losses::kl_loss(v.tape().constant(fp.clone()), v, 1.0), &q)
            },
        },
        GradCheck {
            name: "kl_temperature_2",
            run: |r| {
                let fp = uniform(r, &[4, 6], -2.0, 2.0);
                let q = uniform(r, &[4, 6], -2.0, 2.0);
                check_gradient(|v| losses::kl_loss_smoothed(v.tape().constant(fp.clone()), v, 2.0, 0.1), &q)
            },
        },
        GradCheck {
            name: "hybrid",
            run: |r| {
                let y_fp = uniform(r, &[4, 3], -1.0, 1.0);
                let fp = uniform(r, &[4, 6], -2.0, 2.0);
                let w = uniform(r, &[3, 6], -1.0, 1.0);
                // the quantized hidden states drive both the MSE and the logits
                let y_q = uniform(r, &[4, 3], -1.0, 1.0);
                check_gradient(
                    |h| {
                        let t = h.tape();
                        let logits_q = h.matmul(t.constant(w.clone()))?;
                        let b = BlockOutputs::new(t.constant(y_fp.clone()), h)?;
                        losses::hybrid_loss(&b, t.constant(fp.clone()), logits_q, 0.3, 1.5)
                    },
                    &y_q,
                )
            },
        },
        GradCheck { name: "combined_sw_w_0", run: |r| combined_check(r, 0.0) },
        GradCheck { name: "combined_sw_w_0.2", run: |r| combined_check(r, 0.2) },
        GradCheck { name: "combined_sw_w_1", run: |r| combined_check(r, 1.0) },
        GradCheck {
            name: "block_forward",
            run: |r| {
                let (spec, block) = toy_block(r);
                let x = uniform(r, &[2, 3, spec.d_model], -1.0, 1.0);
                let w = uniform(r, &[2, 3, spec.d_model], -1.0, 1.0);
                check_gradient(|v| weighted_sum(block_forward(v, &block, &spec, None)?, &w), &x)
            },
        },
    ]
}

/// Looks up a check by name.
pub fn find(name: &str) -> Result<GradCheck> {
    registry()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::Usage(format!("unknown gradient check {name:?}")))
}
