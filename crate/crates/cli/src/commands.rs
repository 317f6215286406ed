use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use swcalib::calib::{
    calibrate_model, final_hidden_states, kl_finetune_output, make_batches, perplexity, pooled_distance,
    CalibrationReport, KlReport, RunStatus,
};
use swcalib::corpus::{Corpus, CorpusKind};
use swcalib::diffcore::{memtrack, Tensor};
use swcalib::model::{load_container, load_model, save_container, save_model, ModelWeights, QuantState, SavedModel};
use swcalib::oracle::gradcheck::{self, GRAD_TOLERANCE};
use swcalib::{Error, Result};

use crate::config::{CorpusSource, RunConfig};
use crate::error::{CliError, CliResult};
use crate::report::{finite, Failure, FinalBlockMetrics, MetricsReport, SplitPerplexity, Status};

/// Seed offset for the held-out windows behind the final-block distance.
const HELD_OUT_SEED: u64 = 0x5eed_0001;

pub fn cmd_gen_corpus(vocab: u64, tokens: usize, kind: CorpusKind, seed: u64, out: &Path) -> CliResult<Corpus> {
    let corpus = Corpus::generate(kind, vocab, tokens, seed)?;
    corpus.save(out)?;
    Ok(corpus)
}

/// Everything a calibration run produces.
pub struct RunOutput {
    pub model: ModelWeights,
    pub state: QuantState,
    pub calibration: CalibrationReport,
    pub finetune: Option<KlReport>,
    pub metrics: MetricsReport,
    /// Final hidden states of both paths on the held-out windows.
    pub hidden: Option<(Tensor, Tensor)>,
}

/// `Ok(None)` with a failure recorded when `r` failed on a non-finite value.
fn soften<T>(r: Result<T>, metrics: &mut MetricsReport) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ Error::NonFinite { .. }) => {
            metrics.fail(Failure {
                block: None,
                step: None,
                reason: e.to_string(),
            });
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn eval_windows(corpus: &Corpus, seq_len: usize, limit: usize, name: &str) -> Result<Vec<Vec<u32>>> {
    let w = corpus.windows(seq_len, Some(limit));
    if w.is_empty() {
        return Err(Error::Config(format!(
            "split {name:?} holds {} tokens, fewer than one window of {seq_len}",
            corpus.len()
        )));
    }
    Ok(w)
}

fn split_perplexity(
    model: &ModelWeights,
    quant: Option<&QuantState>,
    windows: &[Vec<u32>],
    batch_size: usize,
    metrics: &mut MetricsReport,
) -> Result<SplitPerplexity> {
    let fp = soften(perplexity(model, None, windows, batch_size), metrics)?.and_then(finite);
    let q = match quant {
        Some(q) => soften(perplexity(model, Some(q), windows, batch_size), metrics)?.and_then(finite),
        None => None,
    };
    Ok(SplitPerplexity {
        full_precision: fp,
        quantized: q,
    })
}

/// Block calibration, the optional output stage and evaluation, in memory.
pub fn run_pipeline(cfg: &RunConfig, base: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    memtrack::reset_peak();
    let model = cfg.build_model(base)?;
    let settings = cfg.settings();
    let calib = cfg.calibration();
    let vocab = model.spec.vocab_size;
    let corpus = cfg.corpus.calibration.load(base, vocab)?;
    let windows = corpus.sample_windows(calib.seq_len, calib.n_samples, cfg.seed)?;
    let batches = make_batches(&windows, calib.batch_size);

    let (mut state, report) = calibrate_model(&model, &settings, &batches, &calib, None)?;
    let mut metrics = MetricsReport::new(Some(cfg.quant.to_string()), Some(cfg.seed));
    metrics.absorb_calibration(&report);

    let mut finetune = None;
    if let (None, Some(objective)) = (&report.failure, cfg.output_finetune) {
        let (tuned, r) = kl_finetune_output(&model, &state, &batches, &calib, objective)?;
        if let RunStatus::Failed { step, reason } = &r.status {
            metrics.fail(Failure {
                block: None,
                step: Some(*step),
                reason: format!("output fine-tuning: {reason}"),
            });
        } else {
            state = tuned;
        }
        metrics.output_finetune = Some((&r).into());
        finetune = Some(r);
    }

    let ok = metrics.status == Status::Completed;
    let seq = cfg.eval_seq_len();
    for (name, source) in &cfg.corpus.eval {
        let split = source.load(base, vocab)?;
        let w = eval_windows(&split, seq, cfg.eval.windows, name)?;
        let p = split_perplexity(&model, ok.then_some(&state), &w, cfg.eval.batch_size, &mut metrics)?;
        metrics.perplexity.insert(name.clone(), p);
    }

    let mut hidden = None;
    if ok {
        let held = corpus.sample_windows(seq, cfg.eval.windows, cfg.seed ^ HELD_OUT_SEED)?;
        if let Some((fp, q)) = soften(final_hidden_states(&model, &state, &held, cfg.eval.batch_size), &mut metrics)? {
            let d = pooled_distance(&fp, &q, cfg.eval.sw_n_proj, cfg.eval.sw_seed)?;
            metrics.final_block = Some(FinalBlockMetrics::from_distance(&d, cfg.eval.sw_n_proj));
            hidden = Some((fp, q));
        }
    }
    metrics.peak_memory_bytes = metrics.peak_memory_bytes.max(memtrack::peak_bytes() as u64);
    metrics.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(RunOutput {
        model,
        state,
        calibration: report,
        finetune,
        metrics,
        hidden,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Files written into a run's output directory.
pub mod files {
    pub const MODEL: &str = "model.swq";
    pub const CALIBRATION_REPORT: &str = "calibration_report.json";
    pub const FINETUNE_REPORT: &str = "finetune_report.json";
    pub const METRICS: &str = "metrics.json";
    pub const TRAJECTORY: &str = "trajectory.csv";
    pub const HIDDEN_FP: &str = "final_hidden_fp.swq";
    pub const HIDDEN_Q: &str = "final_hidden_q.swq";
    /// Name of the single tensor in each hidden-state file.
    pub const HIDDEN_TENSOR: &str = "hidden";
}

pub fn write_run_artifacts(dir: &Path, out: &RunOutput) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    save_model(
        &dir.join(files::MODEL),
        &SavedModel {
            model: out.model.clone(),
            quant: Some(out.state.clone()),
        },
    )?;
    write_json(&dir.join(files::CALIBRATION_REPORT), &out.calibration)?;
    if let Some(f) = &out.finetune {
        write_json(&dir.join(files::FINETUNE_REPORT), f)?;
    }
    crate::report::write_trajectory_csv(fs::File::create(dir.join(files::TRAJECTORY))?, &out.calibration)?;
    if let Some((fp, q)) = &out.hidden {
        save_container(&dir.join(files::HIDDEN_FP), &[(files::HIDDEN_TENSOR.to_string(), fp.clone())])?;
        save_container(&dir.join(files::HIDDEN_Q), &[(files::HIDDEN_TENSOR.to_string(), q.clone())])?;
    }
    write_json(&dir.join(files::METRICS), &out.metrics)?;
    Ok(())
}

/// Maps a failed report onto the matching error, after artifacts are written.
fn failure_error(metrics: &MetricsReport) -> Option<CliError> {
    let f = metrics.failure.as_ref()?;
    Some(match (f.block, f.step) {
        (Some(block), Some(step)) => CliError::CalibrationFailed {
            block,
            step,
            reason: f.reason.clone(),
        },
        _ => CliError::Engine(Error::NonFinite {
            op: "evaluation",
            phase: swcalib::Phase::Forward,
        }),
    })
}

/// Runs a config end to end and writes its artifacts.
pub fn cmd_calibrate(config: &Path) -> CliResult<RunOutput> {
    let (cfg, base) = RunConfig::load(config)?;
    let out = run_pipeline(&cfg, &base)?;
    write_run_artifacts(&crate::config::resolve(&base, &cfg.output_dir), &out)?;
    match failure_error(&out.metrics) {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub quantized: bool,
    pub seq_len: Option<usize>,
    pub windows: usize,
    pub batch_size: usize,
    pub sw_n_proj: usize,
    pub sw_seed: u64,
}

/// Perplexity of a saved model on one corpus; with `quantized`, the
/// quantized path and the final-block distance as well.
pub fn cmd_eval(model_path: &Path, corpus_path: &Path, opts: &EvalOptions) -> CliResult<MetricsReport> {
    let start = Instant::now();
    memtrack::reset_peak();
    let saved = load_model(model_path)?;
    let quant = match (opts.quantized, &saved.quant) {
        (true, None) => {
            return Err(Error::Usage(format!("{} holds no quantizer parameters", model_path.display())).into())
        }
        (true, Some(q)) => Some(q),
        (false, _) => None,
    };
    let model = &saved.model;
    let corpus = CorpusSource::File(corpus_path.to_path_buf()).load(Path::new(""), model.spec.vocab_size)?;
    let seq = opts.seq_len.unwrap_or(model.spec.max_seq_len);
    let name = corpus_path
        .file_stem()
        .map_or_else(|| "corpus".to_string(), |s| s.to_string_lossy().into_owned());
    let windows = eval_windows(&corpus, seq, opts.windows, &name)?;

    let mut metrics = MetricsReport::new(quant.map(|q| q.settings.config.to_string()), None);
    let p = split_perplexity(model, quant, &windows, opts.batch_size, &mut metrics)?;
    metrics.perplexity.insert(name, p);
    if let Some(q) = quant {
        if let Some((fp, qh)) = soften(final_hidden_states(model, q, &windows, opts.batch_size), &mut metrics)? {
            let d = pooled_distance(&fp, &qh, opts.sw_n_proj, opts.sw_seed)?;
            metrics.final_block = Some(FinalBlockMetrics::from_distance(&d, opts.sw_n_proj));
        }
    }
    metrics.peak_memory_bytes = memtrack::peak_bytes() as u64;
    metrics.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwProbe {
    pub sw: f64,
    pub stderr: f64,
    pub n_proj: usize,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
}

/// The single tensor of a container, or the one called `name`, as `[N×d]`.
pub fn load_points(path: &Path, name: Option<&str>) -> Result<Tensor> {
    let tensors = load_container(path)?;
    let t = match name {
        Some(n) => tensors
            .into_iter()
            .find(|(k, _)| k == n)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Usage(format!("{} has no tensor named {n:?}", path.display())))?,
        None => {
            let mut it = tensors.into_iter();
            match (it.next(), it.next()) {
                (Some((_, t)), None) => t,
                _ => {
                    return Err(Error::Usage(format!(
                        "{} must hold exactly one tensor (or pass a name)",
                        path.display()
                    )))
                }
            }
        }
    };
    match *t.shape() {
        [_, _] => Ok(t),
        [b, s, d] => t.reshape(&[b * s, d]),
        ref s => Err(Error::Shape(format!("expected an [N×d] or [B×S×d] tensor, got {s:?}"))),
    }
}

pub fn cmd_sw_distance(
    a: &Path,
    b: &Path,
    name: Option<&str>,
    n_proj: usize,
    seed: u64,
) -> CliResult<SwProbe> {
    let (ta, tb) = (load_points(a, name)?, load_points(b, name)?);
    if ta.shape() != tb.shape() {
        return Err(Error::Shape(format!(
            "point clouds differ in shape: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        ))
        .into());
    }
    if n_proj == 0 {
        return Err(Error::Usage("--n-proj must be at least 1".into()).into());
    }
    let d = pooled_distance(&ta, &tb, n_proj, seed)?;
    Ok(SwProbe {
        sw: d.sw,
        stderr: d.sw_stderr,
        n_proj,
        seed,
        n: ta.shape()[0],
        d: ta.shape()[1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub op: String,
    pub worst_rel_error: Option<f64>,
    pub passed: bool,
    pub error: Option<String>,
}

/// Runs the named check, or every registered one, `trials` times.
pub fn cmd_gradcheck(op: Option<&str>, trials: usize, seed: u64) -> CliResult<Vec<GradcheckRow>> {
    if trials == 0 {
        return Err(Error::Usage("--trials must be at least 1".into()).into());
    }
    let checks = match op {
        Some(name) => vec![gradcheck::find(name)?],
        None => gradcheck::registry(),
    };
    Ok(checks
        .iter()
        .map(|c| match c.worst_error(trials, seed) {
            Ok(e) => GradcheckRow {
                op: c.name.to_string(),
                worst_rel_error: Some(e),
                passed: e < GRAD_TOLERANCE,
                error: None,
            },
            Err(e) => GradcheckRow {
                op: c.name.to_string(),
                worst_rel_error: None,
                passed: false,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

pub fn write_gradcheck_table<W: Write>(mut out: W, rows: &[GradcheckRow]) -> std::io::Result<()> {
    let width = rows.iter().map(|r| r.op.len()).max().unwrap_or(2).max(2);
    writeln!(out, "{:<width$}  {:>12}  result", "op", "rel_error")?;
    for r in rows {
        let err = r.worst_rel_error.map_or_else(|| "-".to_string(), |e| format!("{e:.3e}"));
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        write!(out, "{:<width$}  {err:>12}  {verdict}", r.op)?;
        if let Some(e) = &r.error {
            write!(out, "  ({e})")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SwWeight,
    NProj,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sw_w" => Ok(SweepAxis::SwWeight),
            "n_proj" => Ok(SweepAxis::NProj),
            _ => Err(Error::Usage(format!("unknown sweep axis {s:?} (expected sw_w or n_proj)"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SwWeight => "sw_w",
            SweepAxis::NProj => "n_proj",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        let bad = || Error::Usage(format!("bad {} value {value:?}", self.name()));
        match self {
            SweepAxis::SwWeight => cfg.calibration.loss.sw_w = value.trim().parse().map_err(|_| bad())?,
            SweepAxis::NProj => cfg.calibration.loss.n_proj = value.trim().parse().map_err(|_| bad())?,
        }
        cfg.validate()
    }
}

/// One row of the sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub uniform_ppl: Option<f64>,
    pub mixed_ppl: Option<f64>,
    pub sw_distance: Option<f64>,
}

pub const SWEEP_SPLITS: [&str; 2] = ["uniform", "mixed"];

/// One full calibration and evaluation per value. Each run writes its
/// artifacts under `<output_dir>/sweep/<axis>=<value>/`; the CSV goes to
/// `<output_dir>/sweep_<axis>.csv`.
pub fn cmd_sweep(config: &Path, axis: SweepAxis, values: &[String]) -> CliResult<(PathBuf, Vec<SweepRow>)> {
    let (cfg, base) = RunConfig::load(config)?;
    if values.is_empty() {
        return Err(Error::Usage("--values needs at least one entry".into()).into());
    }
    if let Some(missing) = SWEEP_SPLITS.iter().find(|s| !cfg.corpus.eval.contains_key(**s)) {
        return Err(Error::Config(format!("sweep needs an eval split named {missing:?}")).into());
    }
    let out_dir = crate::config::resolve(&base, &cfg.output_dir);
    let mut runs = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        axis.apply(&mut c, v)?;
        runs.push((v.trim().to_string(), c));
    }
    let mut rows = Vec::new();
    for (v, c) in runs {
        let out = run_pipeline(&c, &base)?;
        write_run_artifacts(&out_dir.join("sweep").join(format!("{}={v}", axis.name())), &out)?;
        let ppl = |s: &str| out.metrics.perplexity.get(s).and_then(|p| p.quantized);
        rows.push(SweepRow {
            value: v,
            uniform_ppl: ppl("uniform"),
            mixed_ppl: ppl("mixed"),
            sw_distance: out.metrics.final_block.and_then(|f| f.sw),
        });
    }
    let csv_path = out_dir.join(format!("sweep_{}.csv", axis.name()));
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok((csv_path, rows))
}
