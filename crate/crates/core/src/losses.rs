//! Calibration objectives on flattened block outputs and final logits.
//!
//! Block outputs are compared as `N×d` point clouds with `N = batch·seq`.
//! The sliced-Wasserstein term projects both clouds onto random unit
//! directions, sorts each projection and averages the mean absolute gap
//! between the sorted sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{nn, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Full-precision and quantized outputs of one block, both `[N×d]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutputs<'t> {
    y_fp: Var<'t>,
    y_q: Var<'t>,
}

impl<'t> BlockOutputs<'t> {
    /// Accepts `[N×d]` or `[B×S×d]` inputs; the latter are flattened.
    pub fn new(y_fp: Var<'t>, y_q: Var<'t>) -> Result<Self> {
        let (sf, sq) = (y_fp.shape(), y_q.shape());
        if sf != sq {
            return shape_err(format!("block outputs differ in shape: {sf:?} vs {sq:?}"));
        }
        let flat = |v: Var<'t>, s: &[usize]| -> Result<Var<'t>> {
            match s.len() {
                2 => Ok(v),
                3 => v.reshape(&[s[0] * s[1], s[2]]),
                _ => shape_err(format!("block outputs must be [N×d] or [B×S×d], got {s:?}")),
            }
        };
        let (y_fp, y_q) = (flat(y_fp, &sf)?, flat(y_q, &sq)?);
        let s = y_fp.shape();
        if s[0] == 0 || s[1] == 0 {
            return shape_err("block outputs need N >= 1 and d >= 1");
        }
        Ok(Self { y_fp, y_q })
    }

    pub fn y_fp(&self) -> Var<'t> {
        self.y_fp
    }

    pub fn y_q(&self) -> Var<'t> {
        self.y_q
    }

    pub fn n(&self) -> usize {
        self.y_fp.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.y_fp.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MseReduction {
    /// Squared Frobenius norm divided by `N·d`.
    #[default]
    Mean,
    /// Raw squared Frobenius norm.
    Sum,
}

/// When projection directions are drawn during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSchedule {
    /// Fresh directions every optimisation step.
    #[default]
    Resample,
    /// One set per block, reused for every step.
    FixedPerBlock,
}

/// Declarative choice and weighting of the calibration loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub sw_w: f64,
    pub n_proj: usize,
    pub kl_temperature: f64,
    pub label_smoothing: f64,
    pub hybrid_alpha: f64,
    pub projection_seed: u64,
    pub mse_reduction: MseReduction,
    pub projections: ProjectionSchedule,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            sw_w: 0.0,
            n_proj: 128,
            kl_temperature: 1.0,
            label_smoothing: 0.0,
            hybrid_alpha: 0.5,
            projection_seed: 0,
            mse_reduction: MseReduction::Mean,
            projections: ProjectionSchedule::Resample,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("sw_w", self.sw_w)?;
        unit("hybrid_alpha", self.hybrid_alpha)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.n_proj == 0 {
            return Err(Error::Config("n_proj must be at least 1".into()));
        }
        if !(self.kl_temperature > 0.0 && self.kl_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "kl_temperature must be positive, got {}",
                self.kl_temperature
            )));
        }
        Ok(())
    }
}

/// `n_proj` unit directions in `R^d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    u: Tensor,
}

impl ProjectionSet {
    /// Normalises the given rows. Zero rows are rejected.
    pub fn from_directions(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Usage("at least one projection direction is required".into()));
        }
        let normalized: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 && norm.is_finite() {
                    Ok(r.iter().map(|v| v / norm).collect())
                } else {
                    Err(Error::Usage("projection direction must be non-zero".into()))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            u: Tensor::from_rows(&normalized)?,
        })
    }

    pub fn n_proj(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.u
    }
}

/// Gaussian rows normalised to unit length, drawn from `rng`.
pub fn sample_projections_with<R: Rng + ?Sized>(
    d: usize,
    n_proj: usize,
    rng: &mut R,
) -> Result<ProjectionSet> {
    if d == 0 || n_proj == 0 {
        return Err(Error::Usage(format!(
            "projections need d >= 1 and n_proj >= 1, got d={d}, n_proj={n_proj}"
        )));
    }
    let mut rows = Vec::with_capacity(n_proj);
    while rows.len() < n_proj {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if row.iter().any(|&v| v != 0.0) {
            rows.push(row);
        }
    }
    ProjectionSet::from_directions(&rows)
}

/// Deterministic projections for a seed.
pub fn sample_projections(d: usize, n_proj: usize, seed: u64) -> Result<ProjectionSet> {
    sample_projections_with(d, n_proj, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Seeded source of projection sets, one independent ChaCha stream per
/// block so blocks never share directions and can be drawn in any order.
pub struct ProjectionStream {
    rng: ChaCha8Rng,
}

impl ProjectionStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn next_set(&mut self, d: usize, n_proj: usize) -> Result<ProjectionSet> {
        sample_projections_with(d, n_proj, &mut self.rng)
    }
}

/// Squared error between the two outputs, mean- or sum-reduced.
pub fn mse_loss_with<'t>(b: &BlockOutputs<'t>, reduction: MseReduction) -> Result<Var<'t>> {
    let sq = b.y_fp.sub(b.y_q)?.square()?;
    match reduction {
        MseReduction::Mean => sq.mean(),
        MseReduction::Sum => sq.sum(),
    }
}

/// Mean-reduced squared error.
pub fn mse_loss<'t>(b: &BlockOutputs<'t>) -> Result<Var<'t>> {
    mse_loss_with(b, MseReduction::Mean)
}

/// Empirical 1-D Wasserstein-1 distance between equal-size samples: mean
/// absolute difference of the ascending-sorted sequences.
pub fn w1_1d<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 1 || sa != sb {
        return Err(Error::Usage(format!(
            "w1_1d needs two 1-D inputs of equal length, got {sa:?} and {sb:?}"
        )));
    }
    if sa[0] == 0 {
        return shape_err("w1_1d of empty samples");
    }
    let (a, _) = a.sort_with_permutation()?;
    let (b, _) = b.sort_with_permutation()?;
    a.sub(b)?.abs()?.mean()
}

/// Average of [`w1_1d`] over the projections `Y·u_i` of both outputs.
pub fn sliced_wasserstein_loss<'t>(b: &BlockOutputs<'t>, proj: &ProjectionSet) -> Result<Var<'t>> {
    if proj.dim() != b.d() {
        return shape_err(format!(
            "projection dimension {} does not match block width {}",
            proj.dim(),
            b.d()
        ));
    }
    let tape = b.y_fp.tape();
    let ut = tape.constant(proj.matrix().transpose()?);
    // [n_proj × N]: row i holds the projections onto u_i
    let p_fp = b.y_fp.matmul(ut)?.transpose()?.sort_last()?;
    let p_q = b.y_q.matmul(ut)?.transpose()?.sort_last()?;
    // every row has N entries, so the global mean is the mean of row means
    p_fp.sub(p_q)?.abs()?.mean()
}

/// The individual terms and their weighted combination.
#[derive(Debug, Clone, Copy)]
pub struct BlockLoss<'t> {
    pub total: Var<'t>,
    pub mse: Var<'t>,
    pub sw: Var<'t>,
}

/// `(1 − sw_w)·MSE + sw_w·SW`, returning every term.
pub fn combined_block_loss_terms<'t>(
    b: &BlockOutputs<'t>,
    spec: &LossSpec,
    proj: &ProjectionSet,
) -> Result<BlockLoss<'t>> {
    if !(0.0..=1.0).contains(&spec.sw_w) {
        return Err(Error::Config(format!("sw_w must lie in [0, 1], got {}", spec.sw_w)));
    }
    let mse = mse_loss_with(b, spec.mse_reduction)?;
    let sw = sliced_wasserstein_loss(b, proj)?;
    let total = mse
        .mul_scalar(1.0 - spec.sw_w)?
        .add(sw.mul_scalar(spec.sw_w)?)?;
    Ok(BlockLoss { total, mse, sw })
}

pub fn combined_block_loss<'t>(
    b: &BlockOutputs<'t>,
    spec: &LossSpec,
    proj: &ProjectionSet,
) -> Result<Var<'t>> {
    Ok(combined_block_loss_terms(b, spec, proj)?.total)
}

/// Forward KL divergence `KL(p_fp ‖ p_q)` between temperature-scaled
/// softmax distributions, averaged over positions. The full-precision side
/// is a frozen reference and receives no gradient.
pub fn kl_loss<'t>(logits_fp: Var<'t>, logits_q: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    kl_loss_smoothed(logits_fp, logits_q, temperature, 0.0)
}

/// [`kl_loss`] with the reference distribution mixed toward uniform by
/// `smoothing`.
pub fn kl_loss_smoothed<'t>(
    logits_fp: Var<'t>,
    logits_q: Var<'t>,
    temperature: f64,
    smoothing: f64,
) -> Result<Var<'t>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("smoothing must lie in [0, 1), got {smoothing}")));
    }
    let (sf, sq) = (logits_fp.shape(), logits_q.shape());
    if sf != sq || sf.is_empty() {
        return shape_err(format!("logit shapes differ: {sf:?} vs {sq:?}"));
    }
    let vocab = *sf.last().unwrap_or(&0);
    let positions = sf.iter().product::<usize>() / vocab.max(1);
    if vocab == 0 || positions == 0 {
        return shape_err("empty logits");
    }
    let fp = logits_fp.value();
    if !fp.all_finite() {
        return Err(Error::NonFinite {
            op: "kl_loss",
            phase: crate::Phase::Forward,
        });
    }
    let mut p = nn::softmax_rows(&fp.map(|v| v / temperature));
    if smoothing > 0.0 {
        let floor = smoothing / vocab as f64;
        p = p.map(|v| (1.0 - smoothing) * v + floor);
    }
    let neg_entropy: f64 = p
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
        .sum();
    let tape = logits_q.tape();
    let log_q = logits_q
        .reshape(&[positions, vocab])?
        .mul_scalar(1.0 / temperature)?
        .log_softmax_last()?;
    let p = tape.constant(p.reshape(&[positions, vocab])?);
    let cross = log_q.mul(p)?.sum()?;
    cross
        .neg()?
        .add_scalar(neg_entropy)?
        .mul_scalar(1.0 / positions as f64)
}

/// `α·MSE + (1 − α)·KL`.
pub fn hybrid_loss<'t>(
    b: &BlockOutputs<'t>,
    logits_fp: Var<'t>,
    logits_q: Var<'t>,
    alpha: f64,
    temperature: f64,
) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("hybrid alpha must lie in [0, 1], got {alpha}")));
    }
    let mse = mse_loss(b)?;
    let kl = kl_loss(logits_fp, logits_q, temperature)?;
    mse.mul_scalar(alpha)?.add(kl.mul_scalar(1.0 - alpha)?)
}

/// Convenience for callers holding plain tensors: SW value on a scratch tape.
pub fn sliced_wasserstein_value(y_fp: &Tensor, y_q: &Tensor, proj: &ProjectionSet) -> Result<f64> {
    let tape = Tape::new();
    let b = BlockOutputs::new(tape.constant(y_fp.clone()), tape.constant(y_q.clone()))?;
    Ok(sliced_wasserstein_loss(&b, proj)?.item())
}

/// Per-projection W1 values on plain tensors.
pub fn per_projection_w1(y_fp: &Tensor, y_q: &Tensor, proj: &ProjectionSet) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let b = BlockOutputs::new(tape.constant(y_fp.clone()), tape.constant(y_q.clone()))?;
    if proj.dim() != b.d() {
        return shape_err("projection dimension mismatch");
    }
    let ut = tape.constant(proj.matrix().transpose()?);
    let p_fp = b.y_fp.matmul(ut)?.transpose()?.sort_last()?;
    let p_q = b.y_q.matmul(ut)?.transpose()?.sort_last()?;
    let gaps = p_fp.sub(p_q)?.abs()?.mean_axis(1)?;
    Ok(gaps.value().into_data())
}

#[cfg(test)]
mod tests;
