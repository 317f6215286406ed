//! Sequential block-wise calibration of quantizer parameters.
//!
//! Blocks are calibrated in order. Block `i` sees the outputs of the already
//! calibrated quantized blocks `< i` as its inputs and is pulled toward the
//! full-precision output of block `i` on full-precision inputs. Only the
//! clipping logits and equivalent-transform parameters move; raw weights are
//! read-only throughout.

mod adam;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{memtrack, Tape, Tensor, Var};
use crate::error::{Error, Phase, Result};
use crate::losses::{
    combined_block_loss_terms, hybrid_loss, kl_loss_smoothed, mse_loss, BlockOutputs, LossSpec,
    ProjectionSchedule, ProjectionSet, ProjectionStream,
};
use crate::model::{
    block_forward, embed, head, next_token_nll, BlockQuantParams, BlockQuantizer, ModelWeights,
    ParamKind, QuantSettings, QuantState,
};

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};

/// Stream offset separating evaluation projections from training ones.
const EVAL_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Calibration windows drawn from the corpus.
    pub n_samples: usize,
    pub lwc_lr: f64,
    pub let_lr: f64,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub seed: u64,
    /// Optimisation steps of the output-level KL stage.
    pub kl_steps: usize,
    pub kl_lr_scale: f64,
    /// Projections used for the before/after block losses in the report.
    pub eval_n_proj: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            epochs: 20,
            batch_size: 8,
            seq_len: 64,
            n_samples: 32,
            lwc_lr: 1e-2,
            let_lr: 5e-3,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            kl_steps: 50,
            kl_lr_scale: 1.0,
            eval_n_proj: 256,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.adam.validate()?;
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("n_samples", self.n_samples),
            ("eval_n_proj", self.eval_n_proj),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("lwc_lr", self.lwc_lr),
            ("let_lr", self.let_lr),
            ("grad_clip", self.grad_clip),
            ("kl_lr_scale", self.kl_lr_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn rates(&self, kinds: &[ParamKind], scale: f64) -> Vec<f64> {
        kinds
            .iter()
            .map(|k| scale * match k {
                ParamKind::Lwc => self.lwc_lr,
                ParamKind::Let => self.let_lr,
            })
            .collect()
    }
}

/// Splits windows into consecutive batches; the last may be short.
pub fn make_batches(windows: &[Vec<u32>], batch_size: usize) -> Vec<Vec<Vec<u32>>> {
    windows.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub mse: f64,
    pub sw: f64,
    pub combined: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Batch-averaged loss terms under the fixed evaluation projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub sw: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { step: usize, reason: String },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub trajectory: Vec<StepRecord>,
    /// `None` when the block failed before finishing; `initial` is `None`
    /// only when the very first evaluation was already non-finite.
    pub initial: Option<LossTerms>,
    pub final_terms: Option<LossTerms>,
    pub status: RunStatus,
    pub wall_seconds: f64,
    pub final_params: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCalibration {
    pub params: BlockQuantParams,
    pub report: BlockReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFailure {
    pub block: usize,
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub blocks: Vec<BlockReport>,
    pub completed_blocks: usize,
    pub failure: Option<BlockFailure>,
    pub peak_memory_bytes: usize,
}

/// Runs one block on plain tensors, optionally quantized.
pub fn run_block(
    x: &Tensor,
    model: &ModelWeights,
    block: usize,
    quant: Option<(&BlockQuantParams, &QuantSettings)>,
) -> Result<Tensor> {
    let tape = Tape::new();
    let q = quant.map(|(p, s)| p.constants(&tape, s)).transpose()?;
    let w = model
        .blocks
        .get(block)
        .ok_or_else(|| Error::Usage(format!("block {block} out of range")))?;
    Ok(block_forward(tape.constant(x.clone()), w, &model.spec, q.as_ref())?.value())
}

/// Embedding outputs `[B×S×d]` of each batch.
pub fn embed_batches(model: &ModelWeights, batches: &[Vec<Vec<u32>>]) -> Result<Vec<Tensor>> {
    batches
        .iter()
        .map(|b| {
            let tape = Tape::new();
            Ok(embed(&tape, b, model)?.value())
        })
        .collect()
}

fn eval_terms(
    targets: &[Tensor],
    outputs: &[Tensor],
    loss: &LossSpec,
    proj: &ProjectionSet,
) -> Result<LossTerms> {
    let (mut mse, mut sw, mut combined) = (0.0, 0.0, 0.0);
    for (t, o) in targets.iter().zip(outputs) {
        let tape = Tape::new();
        let b = BlockOutputs::new(tape.constant(t.clone()), tape.constant(o.clone()))?;
        let terms = combined_block_loss_terms(&b, loss, proj)?;
        mse += terms.mse.item();
        sw += terms.sw.item();
        combined += terms.total.item();
    }
    let n = targets.len() as f64;
    Ok(LossTerms {
        mse: mse / n,
        sw: sw / n,
        combined: combined / n,
    })
}

fn param_map(params: &BlockQuantParams) -> BTreeMap<String, Vec<f64>> {
    params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect()
}

fn grads_of(vars: &[Var<'_>]) -> Vec<Tensor> {
    vars.iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect()
}

fn non_finite_reason(e: &Error) -> Option<String> {
    match e {
        Error::NonFinite { .. } => Some(e.to_string()),
        _ => None,
    }
}

struct BlockStep {
    mse: f64,
    sw: f64,
    combined: f64,
    grads: Vec<Tensor>,
}

fn block_step(
    model: &ModelWeights,
    block: usize,
    params: &BlockQuantParams,
    settings: &QuantSettings,
    target: &Tensor,
    input: &Tensor,
    loss: &LossSpec,
    proj: &ProjectionSet,
) -> Result<BlockStep> {
    let tape = Tape::new();
    let q = params.vars_trainable(&tape, settings)?;
    let y = block_forward(tape.constant(input.clone()), &model.blocks[block], &model.spec, Some(&q))?;
    let outputs = BlockOutputs::new(tape.constant(target.clone()), y)?;
    let terms = combined_block_loss_terms(&outputs, loss, proj)?;
    let combined = terms.total.item();
    if !combined.is_finite() {
        return Err(Error::NonFinite {
            op: "combined_block_loss",
            phase: Phase::Forward,
        });
    }
    tape.backward(terms.total)?;
    Ok(BlockStep {
        mse: terms.mse.item(),
        sw: terms.sw.item(),
        combined,
        grads: grads_of(&q.trainable_vars()),
    })
}

/// Calibrates block `block` starting from `init`.
///
/// `fp_inputs` and `q_inputs` hold one `[B×S×d]` tensor per batch: the
/// full-precision inputs that define the targets, and the inputs the
/// quantized block actually receives. A non-finite value ends the run early
/// with [`RunStatus::Failed`]; the parameters of the last finite step and the
/// partial trajectory are kept.
pub fn calibrate_block(
    block: usize,
    model: &ModelWeights,
    init: &BlockQuantParams,
    settings: &QuantSettings,
    fp_inputs: &[Tensor],
    q_inputs: &[Tensor],
    cfg: &CalibrationConfig,
) -> Result<BlockCalibration> {
    cfg.validate()?;
    settings.validate()?;
    if block >= model.blocks.len() {
        return Err(Error::Usage(format!("block {block} out of range")));
    }
    if fp_inputs.is_empty() || fp_inputs.len() != q_inputs.len() {
        return Err(Error::Usage(format!(
            "need matching non-empty input batches, got {} and {}",
            fp_inputs.len(),
            q_inputs.len()
        )));
    }
    let start = Instant::now();
    let d = model.spec.d_model;
    let mut status = RunStatus::Completed;
    let targets = match fp_inputs
        .iter()
        .map(|x| run_block(x, model, block, None))
        .collect::<Result<Vec<_>>>()
    {
        Ok(t) => t,
        Err(e) => {
            let reason = non_finite_reason(&e).ok_or(e)?;
            status = RunStatus::Failed { step: 0, reason };
            Vec::new()
        }
    };
    let eval_proj = ProjectionStream::new(cfg.loss.projection_seed, EVAL_STREAM + block as u64)
        .next_set(d, cfg.eval_n_proj)?;
    let outputs_with = |p: &BlockQuantParams| -> Result<Vec<Tensor>> {
        q_inputs
            .iter()
            .map(|x| run_block(x, model, block, Some((p, settings))))
            .collect()
    };

    let evaluate = |p: &BlockQuantParams| -> Result<LossTerms> {
        eval_terms(&targets, &outputs_with(p)?, &cfg.loss, &eval_proj)
    };

    let mut params = init.clone();
    let initial = if status.is_completed() {
        match evaluate(&params) {
            Ok(t) => Some(t),
            Err(e) => {
                let reason = non_finite_reason(&e).ok_or(e)?;
                status = RunStatus::Failed { step: 0, reason };
                None
            }
        }
    } else {
        None
    };
    let kinds: Vec<ParamKind> = params.trainable_values().iter().map(|(k, _)| *k).collect();
    let rates = cfg.rates(&kinds, 1.0);
    let mut values: Vec<Tensor> = params.trainable_values().into_iter().map(|(_, t)| t).collect();
    let mut state = AdamState::new(&values);
    let mut stream = ProjectionStream::new(cfg.loss.projection_seed, block as u64);
    let fixed = match cfg.loss.projections {
        ProjectionSchedule::FixedPerBlock => Some(stream.next_set(d, cfg.loss.n_proj)?),
        ProjectionSchedule::Resample => None,
    };

    let mut trajectory = Vec::with_capacity(cfg.epochs * q_inputs.len());
    let epochs = if status.is_completed() { cfg.epochs } else { 0 };
    'outer: for epoch in 0..epochs {
        for (i, (target, input)) in targets.iter().zip(q_inputs).enumerate() {
            let step = trajectory.len();
            let proj = match &fixed {
                Some(p) => p.clone(),
                None => stream.next_set(d, cfg.loss.n_proj)?,
            };
            let result = block_step(model, block, &params, settings, target, input, &cfg.loss, &proj)
                .and_then(|mut s| {
                    let norm = clip_grad_norm(&mut s.grads, cfg.grad_clip);
                    let mut next = values.clone();
                    adam_step(&mut next, &s.grads, &mut state, &rates, &cfg.adam)?;
                    Ok((s, norm, next))
                });
            match result {
                Ok((s, grad_norm, next)) => {
                    trajectory.push(StepRecord {
                        epoch,
                        step: i,
                        mse: s.mse,
                        sw: s.sw,
                        combined: s.combined,
                        grad_norm,
                    });
                    values = next;
                    params.set_trainable_values(&values)?;
                }
                Err(e) => match non_finite_reason(&e) {
                    Some(reason) => {
                        status = RunStatus::Failed { step, reason };
                        break 'outer;
                    }
                    None => return Err(e),
                },
            }
        }
    }

    let final_terms = if status.is_completed() {
        match evaluate(&params) {
            Ok(t) => Some(t),
            Err(e) => {
                let reason = non_finite_reason(&e).ok_or(e)?;
                status = RunStatus::Failed {
                    step: trajectory.len(),
                    reason,
                };
                None
            }
        }
    } else {
        None
    };
    let report = BlockReport {
        block,
        trajectory,
        initial,
        final_terms,
        status,
        wall_seconds: start.elapsed().as_secs_f64(),
        final_params: param_map(&params),
    };
    Ok(BlockCalibration { params, report })
}

/// Observer called with the block index and the quantized-path inputs just
/// before that block is calibrated.
pub type InputHook<'a> = &'a mut dyn FnMut(usize, &[Tensor]);

/// Calibrates every block in order, feeding each block the outputs of the
/// already-calibrated quantized prefix.
///
/// A failing block stops the run: its partial parameters are kept, later
/// blocks keep their initial parameters, and the report names the failure.
pub fn calibrate_model(
    model: &ModelWeights,
    settings: &QuantSettings,
    batches: &[Vec<Vec<u32>>],
    cfg: &CalibrationConfig,
    mut hook: Option<InputHook<'_>>,
) -> Result<(QuantState, CalibrationReport)> {
    cfg.validate()?;
    model.validate()?;
    if batches.is_empty() {
        return Err(Error::Usage("calibration needs at least one batch".into()));
    }
    memtrack::reset_peak();
    let mut state = QuantState::init(model, settings, cfg.seed)?;
    let mut fp_inputs = embed_batches(model, batches)?;
    let mut q_inputs = fp_inputs.clone();
    let mut reports = Vec::with_capacity(model.blocks.len());
    let mut failure = None;
    for block in 0..model.blocks.len() {
        if let Some(h) = hook.as_mut() {
            h(block, &q_inputs);
        }
        let out = calibrate_block(block, model, &state.blocks[block], settings, &fp_inputs, &q_inputs, cfg)?;
        state.blocks[block] = out.params;
        if let RunStatus::Failed { step, reason } = &out.report.status {
            failure = Some(BlockFailure {
                block,
                step: *step,
                reason: reason.clone(),
            });
            reports.push(out.report);
            break;
        }
        reports.push(out.report);
        if block + 1 < model.blocks.len() {
            let frozen = (&state.blocks[block], settings);
            let propagated = q_inputs
                .iter()
                .map(|x| run_block(x, model, block, Some(frozen)))
                .collect::<Result<Vec<_>>>()
                .and_then(|q| {
                    let fp = fp_inputs
                        .iter()
                        .map(|x| run_block(x, model, block, None))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((q, fp))
                });
            match propagated {
                Ok((q, fp)) => (q_inputs, fp_inputs) = (q, fp),
                Err(e) => {
                    failure = Some(BlockFailure {
                        block: block + 1,
                        step: 0,
                        reason: non_finite_reason(&e).ok_or(e)?,
                    });
                    break;
                }
            }
        }
    }
    let completed_blocks = reports.iter().filter(|r| r.status.is_completed()).count();
    Ok((
        state,
        CalibrationReport {
            blocks: reports,
            completed_blocks,
            failure,
            peak_memory_bytes: memtrack::peak_bytes(),
        },
    ))
}

/// Output-level objective for the joint fine-tuning stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputObjective {
    Kl,
    /// `α·MSE(final hidden states) + (1 − α)·KL`.
    Hybrid { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputLoss {
    pub kl: f64,
    pub mse: f64,
    pub total: f64,
}

/// Final hidden states (before the last norm) and logits of one batch.
fn forward_hidden<'t>(
    tape: &'t Tape,
    tokens: &[Vec<u32>],
    model: &ModelWeights,
    quant: Option<&[BlockQuantizer<'t>]>,
) -> Result<(Var<'t>, Var<'t>)> {
    let mut h = embed(tape, tokens, model)?;
    for (i, w) in model.blocks.iter().enumerate() {
        h = block_forward(h, w, &model.spec, quant.map(|q| &q[i]))?;
    }
    Ok((h, head(h, model)?))
}

struct OutputTerms<'t> {
    kl: Var<'t>,
    mse: Var<'t>,
    total: Var<'t>,
}

fn output_terms<'t>(
    tape: &'t Tape,
    tokens: &[Vec<u32>],
    model: &ModelWeights,
    quant: &[BlockQuantizer<'t>],
    reference: &(Tensor, Tensor),
    objective: OutputObjective,
    loss: &LossSpec,
) -> Result<OutputTerms<'t>> {
    let (h_q, logits_q) = forward_hidden(tape, tokens, model, Some(quant))?;
    let h_fp = tape.constant(reference.0.clone());
    let logits_fp = tape.constant(reference.1.clone());
    let b = BlockOutputs::new(h_fp, h_q)?;
    let mse = mse_loss(&b)?;
    let kl = kl_loss_smoothed(logits_fp, logits_q, loss.kl_temperature, loss.label_smoothing)?;
    let total = match objective {
        OutputObjective::Kl => kl,
        OutputObjective::Hybrid { alpha } => {
            hybrid_loss(&b, logits_fp, logits_q, alpha, loss.kl_temperature)?
        }
    };
    Ok(OutputTerms { kl, mse, total })
}

fn fp_reference(model: &ModelWeights, tokens: &[Vec<u32>]) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (h, logits) = forward_hidden(&tape, tokens, model, None)?;
    Ok((h.value(), logits.value()))
}

/// Output-level loss of `state` on one batch, averaged over positions.
pub fn output_loss(
    model: &ModelWeights,
    state: &QuantState,
    tokens: &[Vec<u32>],
    objective: OutputObjective,
    loss: &LossSpec,
) -> Result<OutputLoss> {
    let reference = fp_reference(model, tokens)?;
    let tape = Tape::new();
    let q = state.constants(&tape)?;
    let t = output_terms(&tape, tokens, model, &q, &reference, objective, loss)?;
    Ok(OutputLoss {
        kl: t.kl.item(),
        mse: t.mse.item(),
        total: t.total.item(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub objective: OutputObjective,
    pub trajectory: Vec<OutputLoss>,
    /// Batch-averaged loss before and after fine-tuning.
    pub initial: OutputLoss,
    pub final_loss: Option<OutputLoss>,
    pub status: RunStatus,
    pub wall_seconds: f64,
}

fn mean_output_loss(
    model: &ModelWeights,
    state: &QuantState,
    batches: &[Vec<Vec<u32>>],
    objective: OutputObjective,
    loss: &LossSpec,
) -> Result<OutputLoss> {
    let mut acc = OutputLoss {
        kl: 0.0,
        mse: 0.0,
        total: 0.0,
    };
    for b in batches {
        let l = output_loss(model, state, b, objective, loss)?;
        acc.kl += l.kl;
        acc.mse += l.mse;
        acc.total += l.total;
    }
    let n = batches.len() as f64;
    Ok(OutputLoss {
        kl: acc.kl / n,
        mse: acc.mse / n,
        total: acc.total / n,
    })
}

/// Jointly fine-tunes every block's quantizer parameters against an
/// output-level objective for `cfg.kl_steps` steps, cycling over `batches`.
pub fn kl_finetune_output(
    model: &ModelWeights,
    init: &QuantState,
    batches: &[Vec<Vec<u32>>],
    cfg: &CalibrationConfig,
    objective: OutputObjective,
) -> Result<(QuantState, KlReport)> {
    cfg.validate()?;
    if let OutputObjective::Hybrid { alpha } = objective {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("hybrid alpha must lie in [0, 1], got {alpha}")));
        }
    }
    if batches.is_empty() {
        return Err(Error::Usage("fine-tuning needs at least one batch".into()));
    }
    let start = Instant::now();
    let references = batches
        .iter()
        .map(|b| fp_reference(model, b))
        .collect::<Result<Vec<_>>>()?;
    let mut state = init.clone();
    let initial = mean_output_loss(model, &state, batches, objective, &cfg.loss)?;

    let mut kinds = Vec::new();
    let mut values = Vec::new();
    let mut counts = Vec::new();
    for b in &state.blocks {
        let tv = b.trainable_values();
        counts.push(tv.len());
        for (k, t) in tv {
            kinds.push(k);
            values.push(t);
        }
    }
    let rates = cfg.rates(&kinds, cfg.kl_lr_scale);
    let mut adam_state = AdamState::new(&values);
    let mut trajectory = Vec::with_capacity(cfg.kl_steps);
    let mut status = RunStatus::Completed;

    for step in 0..cfg.kl_steps {
        let i = step % batches.len();
        let result = (|| -> Result<(OutputLoss, Vec<Tensor>)> {
            let tape = Tape::new();
            let q = state
                .blocks
                .iter()
                .map(|b| b.vars_trainable(&tape, &state.settings))
                .collect::<Result<Vec<_>>>()?;
            let t = output_terms(&tape, &batches[i], model, &q, &references[i], objective, &cfg.loss)?;
            let record = OutputLoss {
                kl: t.kl.item(),
                mse: t.mse.item(),
                total: t.total.item(),
            };
            tape.backward(t.total)?;
            let vars: Vec<Var<'_>> = q.iter().flat_map(BlockQuantizer::trainable_vars).collect();
            let mut grads = grads_of(&vars);
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let mut next = values.clone();
            adam_step(&mut next, &grads, &mut adam_state, &rates, &cfg.adam)?;
            Ok((record, next))
        })();
        match result {
            Ok((record, next)) => {
                trajectory.push(record);
                values = next;
                let mut rest = values.as_slice();
                for (b, &n) in state.blocks.iter_mut().zip(&counts) {
                    let (mine, tail) = rest.split_at(n);
                    b.set_trainable_values(mine)?;
                    rest = tail;
                }
            }
            Err(e) => match non_finite_reason(&e) {
                Some(reason) => {
                    status = RunStatus::Failed { step, reason };
                    break;
                }
                None => return Err(e),
            },
        }
    }
    let final_loss = if status.is_completed() {
        Some(mean_output_loss(model, &state, batches, objective, &cfg.loss)?)
    } else {
        None
    };
    Ok((
        state,
        KlReport {
            objective,
            trajectory,
            initial,
            final_loss,
            status,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// `exp` of the mean next-token negative log-likelihood over `windows`.
///
/// Batches are evaluated in parallel; partial sums are combined in batch
/// order so the result does not depend on the thread count.
pub fn perplexity(
    model: &ModelWeights,
    quant: Option<&QuantState>,
    windows: &[Vec<u32>],
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Usage("perplexity needs at least one window".into()));
    }
    let parts = windows
        .par_chunks(batch_size.max(1))
        .map(|b| next_token_nll(b, model, quant))
        .collect::<Result<Vec<_>>>()?;
    let (nll, count) = parts
        .iter()
        .fold((0.0, 0usize), |(s, c), &(n, k)| (s + n, c + k));
    if count == 0 {
        return Err(Error::Usage("windows must hold at least two tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

/// Distances between the full-precision and quantized final-block outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalBlockDistance {
    pub sw: f64,
    /// Standard error of `sw` across projections.
    pub sw_stderr: f64,
    pub mse: f64,
}

/// Final hidden states (before the last norm) of both paths over `windows`,
/// pooled into `[N×d]` matrices.
pub fn final_hidden_states(
    model: &ModelWeights,
    state: &QuantState,
    windows: &[Vec<u32>],
    batch_size: usize,
) -> Result<(Tensor, Tensor)> {
    let mut fp = Vec::new();
    let mut q = Vec::new();
    for b in make_batches(windows, batch_size) {
        let tape = Tape::new();
        let quantizers = state.constants(&tape)?;
        let (hf, _) = forward_hidden(&tape, &b, model, None)?;
        let (hq, _) = forward_hidden(&tape, &b, model, Some(&quantizers))?;
        fp.extend_from_slice(hf.value().data());
        q.extend_from_slice(hq.value().data());
    }
    let d = model.spec.d_model;
    let rows = fp.len() / d;
    Ok((Tensor::new(vec![rows, d], fp)?, Tensor::new(vec![rows, d], q)?))
}

/// SW (with its standard error over projections) and MSE between two
/// `[N×d]` point clouds, using `n_proj` directions drawn from `seed`.
pub fn pooled_distance(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<FinalBlockDistance> {
    let tape = Tape::new();
    let outputs = BlockOutputs::new(tape.constant(a.clone()), tape.constant(b.clone()))?;
    let proj = crate::losses::sample_projections(outputs.d(), n_proj, seed)?;
    let (fa, fb) = (outputs.y_fp().value(), outputs.y_q().value());
    let per = crate::losses::per_projection_w1(&fa, &fb, &proj)?;
    Ok(FinalBlockDistance {
        sw: crate::losses::sliced_wasserstein_loss(&outputs, &proj)?.item(),
        sw_stderr: standard_error(&per),
        mse: mse_loss(&outputs)?.item(),
    })
}

/// Compares the last block's outputs of both paths over `windows`.
pub fn final_block_distance(
    model: &ModelWeights,
    state: &QuantState,
    windows: &[Vec<u32>],
    batch_size: usize,
    n_proj: usize,
    seed: u64,
) -> Result<FinalBlockDistance> {
    let (fp, q) = final_hidden_states(model, state, windows, batch_size)?;
    pooled_distance(&fp, &q, n_proj, seed)
}

/// Sample standard deviation over `√n`; zero for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[cfg(test)]
mod tests;
