//! `MetricsReport`: the machine-readable summary of a run or evaluation.
//!
//! Numbers that could not be computed are `null` and the report carries a
//! failure reason. The JSON layout is pinned by `schemas/metrics_report.json`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use swcalib::calib::{BlockFailure, BlockReport, CalibrationReport, FinalBlockDistance, KlReport, LossTerms, RunStatus};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Failure {
    /// Block index for calibration failures.
    pub block: Option<usize>,
    pub step: Option<usize>,
    pub reason: String,
}

impl From<&BlockFailure> for Failure {
    fn from(f: &BlockFailure) -> Self {
        Self {
            block: Some(f.block),
            step: Some(f.step),
            reason: f.reason.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPerplexity {
    pub full_precision: Option<f64>,
    pub quantized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockMetrics {
    pub block: usize,
    pub status: Status,
    pub initial: Option<LossTerms>,
    #[serde(rename = "final")]
    pub final_terms: Option<LossTerms>,
    pub steps: usize,
}

impl From<&BlockReport> for BlockMetrics {
    fn from(r: &BlockReport) -> Self {
        Self {
            block: r.block,
            status: match r.status {
                RunStatus::Completed => Status::Completed,
                RunStatus::Failed { .. } => Status::Failed,
            },
            initial: r.initial,
            final_terms: r.final_terms,
            steps: r.trajectory.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalBlockMetrics {
    pub sw: Option<f64>,
    pub sw_stderr: Option<f64>,
    pub mse: Option<f64>,
    pub n_proj: usize,
}

impl FinalBlockMetrics {
    pub fn from_distance(d: &FinalBlockDistance, n_proj: usize) -> Self {
        Self {
            sw: finite(d.sw),
            sw_stderr: finite(d.sw_stderr),
            mse: finite(d.mse),
            n_proj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneMetrics {
    pub objective: String,
    pub steps: usize,
    pub initial: Option<f64>,
    #[serde(rename = "final")]
    pub final_loss: Option<f64>,
    pub status: Status,
}

impl From<&KlReport> for FinetuneMetrics {
    fn from(r: &KlReport) -> Self {
        Self {
            objective: match r.objective {
                swcalib::calib::OutputObjective::Kl => "kl".into(),
                swcalib::calib::OutputObjective::Hybrid { alpha } => format!("hybrid(alpha={alpha})"),
            },
            steps: r.trajectory.len(),
            initial: finite(r.initial.total),
            final_loss: r.final_loss.and_then(|l| finite(l.total)),
            status: if r.status.is_completed() {
                Status::Completed
            } else {
                Status::Failed
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub status: Status,
    pub failure: Option<Failure>,
    /// Quantizer tag, or `null` for a full-precision-only evaluation.
    pub quant: Option<String>,
    pub seed: Option<u64>,
    pub perplexity: BTreeMap<String, SplitPerplexity>,
    pub blocks: Vec<BlockMetrics>,
    pub final_block: Option<FinalBlockMetrics>,
    pub output_finetune: Option<FinetuneMetrics>,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub runtime_seconds: f64,
    /// Engine allocation-tracker peak on the calibrating thread.
    pub peak_memory_bytes: u64,
}

impl MetricsReport {
    pub fn new(quant: Option<String>, seed: Option<u64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            status: Status::Completed,
            failure: None,
            quant,
            seed,
            perplexity: BTreeMap::new(),
            blocks: Vec::new(),
            final_block: None,
            output_finetune: None,
            runtime_seconds: 0.0,
            peak_memory_bytes: 0,
        }
    }

    pub fn fail(&mut self, failure: Failure) {
        self.status = Status::Failed;
        if self.failure.is_none() {
            self.failure = Some(failure);
        }
    }

    pub fn absorb_calibration(&mut self, report: &CalibrationReport) {
        self.blocks = report.blocks.iter().map(BlockMetrics::from).collect();
        self.peak_memory_bytes = self.peak_memory_bytes.max(report.peak_memory_bytes as u64);
        if let Some(f) = &report.failure {
            self.fail(f.into());
        }
    }

    /// The report with `runtime_seconds` zeroed, for reproducibility checks.
    pub fn without_runtime(&self) -> Self {
        Self {
            runtime_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// `Some(v)` when `v` is finite.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Writes every block's per-step trajectory as CSV.
pub fn write_trajectory_csv<W: Write>(out: W, report: &CalibrationReport) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["block", "epoch", "step", "mse", "sw", "combined", "grad_norm"])?;
    for b in &report.blocks {
        for r in &b.trajectory {
            w.serialize((b.block, r.epoch, r.step, r.mse, r.sw, r.combined, r.grad_norm))?;
        }
    }
    w.flush()?;
    Ok(())
}
