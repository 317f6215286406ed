use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::QuantConfig;
use crate::diffcore::{logit, sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Raw clipping logit used when no initialisation strategy is requested
/// (`σ(4) ≈ 0.982`).
pub const DEFAULT_LWC_LOGIT: f64 = 4.0;

/// Learnable weight-clipping logits, one pair per quantization group.
/// The effective factors are `σ(gamma_raw)` (upper) and `σ(beta_raw)` (lower).
#[derive(Debug, Clone, PartialEq)]
pub struct LwcParams {
    pub gamma_raw: Tensor,
    pub beta_raw: Tensor,
}

/// Tape handles for [`LwcParams`].
#[derive(Debug, Clone, Copy)]
pub struct LwcVars<'t> {
    pub gamma_raw: Var<'t>,
    pub beta_raw: Var<'t>,
}

impl LwcParams {
    pub fn constant(groups: usize, raw: f64) -> Self {
        Self {
            gamma_raw: Tensor::full(&[groups], raw),
            beta_raw: Tensor::full(&[groups], raw),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.gamma_raw.numel()
    }

    pub fn upper_factors(&self) -> Vec<f64> {
        self.gamma_raw.data().iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn lower_factors(&self) -> Vec<f64> {
        self.beta_raw.data().iter().map(|&r| sigmoid(r)).collect()
    }

    /// Frozen (non-trainable) handles.
    pub fn constants<'t>(&self, tape: &'t Tape) -> LwcVars<'t> {
        LwcVars {
            gamma_raw: tape.constant(self.gamma_raw.clone()),
            beta_raw: tape.constant(self.beta_raw.clone()),
        }
    }

    /// Alias of [`LwcParams::constants`].
    pub fn vars<'t>(&self, tape: &'t Tape) -> LwcVars<'t> {
        self.constants(tape)
    }

    pub fn vars_trainable<'t>(&self, tape: &'t Tape) -> LwcVars<'t> {
        LwcVars {
            gamma_raw: tape.param(self.gamma_raw.clone()),
            beta_raw: tape.param(self.beta_raw.clone()),
        }
    }
}

/// Initialisation heuristics for the clipping logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LwcInit {
    /// Both logits at [`DEFAULT_LWC_LOGIT`].
    #[default]
    Default,
    /// Both factors 0.9.
    Soft,
    /// Both factors 0.5.
    Aggressive,
    /// Upper bound at the `p`-th percentile of each group, lower bound at
    /// the `(100 − p)`-th.
    Percentile { p: f64 },
    /// Factors drawn uniformly from `[lo, hi)` per group.
    Random { lo: f64, hi: f64 },
}

/// Factors are kept this far inside `(0, 1)` so the logits stay finite.
const FACTOR_MARGIN: f64 = 1e-6;

/// Percentile with linear interpolation between order statistics, found by
/// selection rather than a full sort.
fn percentile(values: &mut [f64], p: f64) -> f64 {
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut a, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return a;
    }
    let b = upper.iter().copied().fold(f64::INFINITY, f64::min);
    a + (b - a) * frac
}

/// Builds clipping logits for weights `w` laid out as the quantizer groups
/// them (groups along the last axis).
pub fn lwc_init(w: &Tensor, cfg: &QuantConfig, strategy: LwcInit, seed: u64) -> Result<LwcParams> {
    let groups = cfg.n_groups(w.shape())?;
    let g = w.numel() / groups;
    let from_factors = |up: Vec<f64>, down: Vec<f64>| -> Result<LwcParams> {
        let raw = |f: Vec<f64>| {
            Tensor::vector(
                f.into_iter()
                    .map(|v| logit(v.clamp(FACTOR_MARGIN, 1.0 - FACTOR_MARGIN)))
                    .collect(),
            )
        };
        Ok(LwcParams {
            gamma_raw: raw(up),
            beta_raw: raw(down),
        })
    };
    match strategy {
        LwcInit::Default => Ok(LwcParams::constant(groups, DEFAULT_LWC_LOGIT)),
        LwcInit::Soft => from_factors(vec![0.9; groups], vec![0.9; groups]),
        LwcInit::Aggressive => from_factors(vec![0.5; groups], vec![0.5; groups]),
        LwcInit::Percentile { p } => {
            if !(p > 0.0 && p < 100.0) {
                return Err(Error::Config(format!("percentile must lie in (0, 100), got {p}")));
            }
            let mut up = Vec::with_capacity(groups);
            let mut down = Vec::with_capacity(groups);
            for k in 0..groups {
                let mut vals = w.data()[k * g..(k + 1) * g].to_vec();
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = percentile(&mut vals, p);
                let lo = percentile(&mut vals, 100.0 - p);
                up.push(if max > 0.0 { hi / max } else { 1.0 });
                down.push(if min < 0.0 { lo / min } else { 1.0 });
            }
            from_factors(up, down)
        }
        LwcInit::Random { lo, hi } => {
            if !(lo > 0.0 && lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!(
                    "random clipping range must satisfy 0 < lo < hi <= 1, got [{lo}, {hi})"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let up = (0..groups).map(|_| rng.random_range(lo..hi)).collect();
            let down = (0..groups).map(|_| rng.random_range(lo..hi)).collect();
            from_factors(up, down)
        }
    }
}
