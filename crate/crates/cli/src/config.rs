//! The `RunConfig` file: strict JSON, unknown keys rejected.
//!
//! Relative paths inside a config resolve against the directory holding the
//! config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swcalib::calib::{CalibrationConfig, OutputObjective};
use swcalib::corpus::{Corpus, CorpusKind};
use swcalib::model::{ModelSpec, ModelWeights, QuantSettings, SavedModel};
use swcalib::quant::{HierLetState, LwcInit, QuantConfig};
use swcalib::{Error, Result};

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// Gaussian weights drawn from the run seed.
    Random {
        spec: ModelSpec,
        /// Embedding standard deviation is `embed_scale / √d`.
        #[serde(default = "one")]
        embed_scale: f64,
    },
    /// A saved `SWQ1` model (its quantizer parameters, if any, are ignored).
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub kind: CorpusKind,
    pub tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    File(PathBuf),
    /// Generated on the fly with the model's vocabulary.
    Synthetic(SyntheticCorpus),
}

impl CorpusSource {
    pub fn load(&self, base: &Path, vocab: usize) -> Result<Corpus> {
        let corpus = match self {
            CorpusSource::File(p) => Corpus::load(&resolve(base, p))?,
            CorpusSource::Synthetic(s) => Corpus::generate(s.kind, vocab as u64, s.tokens, s.seed)?,
        };
        if corpus.vocab() > vocab as u64 {
            return Err(Error::Config(format!(
                "corpus vocabulary {} exceeds the model vocabulary {vocab}",
                corpus.vocab()
            )));
        }
        Ok(corpus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub calibration: CorpusSource,
    /// Named evaluation splits, e.g. `uniform` and `mixed`.
    #[serde(default)]
    pub eval: BTreeMap<String, CorpusSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantOptions {
    pub let_enabled: Option<bool>,
    pub hier_let: bool,
    pub hier_epsilon: f64,
    pub lwc_init: LwcInit,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            let_enabled: None,
            hier_let: false,
            hier_epsilon: HierLetState::default().epsilon,
            lwc_init: LwcInit::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Non-overlapping windows evaluated per split.
    pub windows: usize,
    pub batch_size: usize,
    /// Window length; defaults to the calibration `seq_len`.
    pub seq_len: Option<usize>,
    /// Projections for the final-block SW distance.
    pub sw_n_proj: usize,
    pub sw_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            windows: 64,
            batch_size: 8,
            seq_len: None,
            sw_n_proj: 256,
            sw_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub quant: QuantConfig,
    #[serde(default)]
    pub quant_options: QuantOptions,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    /// Optional joint output-level stage after block calibration.
    #[serde(default)]
    pub output_finetune: Option<OutputObjective>,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; returns it with its base directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let cfg = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        self.settings().validate()?;
        self.calibration.validate()?;
        if self.calibration.seed != 0 && self.calibration.seed != self.seed {
            return Err(Error::Config(format!(
                "calibration.seed {} conflicts with the run seed {}; set only `seed`",
                self.calibration.seed, self.seed
            )));
        }
        if let ModelSource::Random { spec, embed_scale } = &self.model {
            spec.validate()?;
            if !(embed_scale.is_finite() && *embed_scale > 0.0) {
                return Err(Error::Config(format!("embed_scale must be positive, got {embed_scale}")));
            }
        }
        if self.eval.windows == 0 || self.eval.batch_size == 0 || self.eval.sw_n_proj == 0 {
            return Err(Error::Config("eval windows, batch_size and sw_n_proj must be at least 1".into()));
        }
        if self.eval.seq_len == Some(0) {
            return Err(Error::Config("eval seq_len must be at least 1".into()));
        }
        if let Some(OutputObjective::Hybrid { alpha }) = self.output_finetune {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("hybrid alpha must lie in [0, 1], got {alpha}")));
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> QuantSettings {
        QuantSettings {
            config: self.quant,
            let_enabled: self.quant_options.let_enabled,
            hier_let: self.quant_options.hier_let,
            hier_epsilon: self.quant_options.hier_epsilon,
            lwc_init: self.quant_options.lwc_init,
        }
    }

    /// Calibration settings with the run seed applied.
    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            seed: self.seed,
            ..self.calibration.clone()
        }
    }

    pub fn eval_seq_len(&self) -> usize {
        self.eval.seq_len.unwrap_or(self.calibration.seq_len)
    }

    pub fn build_model(&self, base: &Path) -> Result<ModelWeights> {
        match &self.model {
            ModelSource::Random { spec, embed_scale } => {
                ModelWeights::random_with_embed_scale(spec, self.seed, *embed_scale)
            }
            ModelSource::File(p) => {
                let SavedModel { model, .. } = swcalib::model::load_model(&resolve(base, p))?;
                Ok(model)
            }
        }
    }
}
