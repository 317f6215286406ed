//! Toy pre-norm decoder transformer and its quantized forward path.
//!
//! Linear weights are stored `[in × out]` and applied as `x·W + b`. For
//! quantization a weight is viewed transposed (`[out × in]`) so quantization
//! groups run along the input dimension of each output channel.

mod container;
mod quantized;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{nn, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use container::{
    load_container, load_model, read_container, save_container, save_model, write_container,
    NamedTensors, SavedModel, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use quantized::{
    fold_let_into_norms, BlockQuantParams, BlockQuantizer, LetSite, Linear, ParamKind, QuantSettings,
    QuantState,
};

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_mult: usize,
    pub max_seq_len: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("ff_mult", self.ff_mult),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model field {name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

/// Weights of one pre-norm block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_shift: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_shift: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl BlockWeights {
    /// Gaussian weights scaled by `1/√fan_in`, zero biases, unit norms.
    pub fn random(spec: &ModelSpec, rng: &mut impl Rng) -> Self {
        let (d, f) = (spec.d_model, spec.d_ff());
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_shift: Tensor::zeros(&[d]),
            wq: gaussian(rng, &[d, d], sd),
            bq: Tensor::zeros(&[d]),
            wk: gaussian(rng, &[d, d], sd),
            bk: Tensor::zeros(&[d]),
            wv: gaussian(rng, &[d, d], sd),
            bv: Tensor::zeros(&[d]),
            wo: gaussian(rng, &[d, d], sd),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_shift: Tensor::zeros(&[d]),
            w1: gaussian(rng, &[d, f], sd),
            b1: Tensor::zeros(&[f]),
            w2: gaussian(rng, &[f, d], sf),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn linear(&self, which: Linear) -> (&Tensor, &Tensor) {
        match which {
            Linear::Q => (&self.wq, &self.bq),
            Linear::K => (&self.wk, &self.bk),
            Linear::V => (&self.wv, &self.bv),
            Linear::O => (&self.wo, &self.bo),
            Linear::Fc1 => (&self.w1, &self.b1),
            Linear::Fc2 => (&self.w2, &self.b2),
        }
    }

    /// Every tensor with its name relative to the block.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1.gain", &self.ln1_gain),
            ("ln1.shift", &self.ln1_shift),
            ("attn.q.weight", &self.wq),
            ("attn.q.bias", &self.bq),
            ("attn.k.weight", &self.wk),
            ("attn.k.bias", &self.bk),
            ("attn.v.weight", &self.wv),
            ("attn.v.bias", &self.bv),
            ("attn.o.weight", &self.wo),
            ("attn.o.bias", &self.bo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.shift", &self.ln2_shift),
            ("mlp.fc1.weight", &self.w1),
            ("mlp.fc1.bias", &self.b1),
            ("mlp.fc2.weight", &self.w2),
            ("mlp.fc2.bias", &self.b2),
        ]
    }

    pub fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        let (d, f) = (spec.d_model, spec.d_ff());
        let expected: [(&str, Vec<usize>); 16] = [
            ("ln1.gain", vec![d]),
            ("ln1.shift", vec![d]),
            ("attn.q.weight", vec![d, d]),
            ("attn.q.bias", vec![d]),
            ("attn.k.weight", vec![d, d]),
            ("attn.k.bias", vec![d]),
            ("attn.v.weight", vec![d, d]),
            ("attn.v.bias", vec![d]),
            ("attn.o.weight", vec![d, d]),
            ("attn.o.bias", vec![d]),
            ("ln2.gain", vec![d]),
            ("ln2.shift", vec![d]),
            ("mlp.fc1.weight", vec![d, f]),
            ("mlp.fc1.bias", vec![f]),
            ("mlp.fc2.weight", vec![f, d]),
            ("mlp.fc2.bias", vec![d]),
        ];
        for ((name, t), (_, want)) in self.named().into_iter().zip(expected.iter()) {
            if t.shape() != want.as_slice() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A whole model: token embedding (tied with the output head), blocks and
/// the final norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    pub embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub lnf_gain: Tensor,
    pub lnf_shift: Tensor,
}

impl ModelWeights {
    pub fn random(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::random_with_embed_scale(spec, seed, 1.0)
    }

    /// As [`ModelWeights::random`] with the embedding standard deviation
    /// multiplied by `embed_scale`. Small scales give near-uniform logits.
    pub fn random_with_embed_scale(spec: &ModelSpec, seed: u64, embed_scale: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_model;
        let embed = gaussian(&mut rng, &[spec.vocab_size, d], embed_scale / (d as f64).sqrt());
        let blocks = (0..spec.n_blocks)
            .map(|_| BlockWeights::random(spec, &mut rng))
            .collect();
        Ok(Self {
            spec: *spec,
            embed,
            blocks,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_shift: Tensor::zeros(&[d]),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.blocks.len() != self.spec.n_blocks {
            return Err(Error::Shape(format!(
                "{} blocks present, spec says {}",
                self.blocks.len(),
                self.spec.n_blocks
            )));
        }
        if self.embed.shape() != [self.spec.vocab_size, self.spec.d_model] {
            return Err(Error::Shape(format!("embedding has shape {:?}", self.embed.shape())));
        }
        for b in &self.blocks {
            b.check_shapes(&self.spec)?;
        }
        Ok(())
    }
}

fn batch_layout(shape: &[usize], d: usize) -> Result<(usize, usize)> {
    match shape {
        [b, s, dd] if *dd == d => Ok((*b, *s)),
        _ => Err(Error::Shape(format!("expected [B×S×{d}] activations, got {shape:?}"))),
    }
}

/// One pre-norm residual block on `[B×S×d]` activations:
/// `h = x + Attn(LN₁(x))`, `out = h + MLP(LN₂(h))`.
///
/// With a quantizer every linear layer uses fake-quantized weights (and
/// quantized activations when the config asks for them), wrapped in the
/// equivalent transformation when enabled.
pub fn block_forward<'t>(
    x: Var<'t>,
    w: &BlockWeights,
    spec: &ModelSpec,
    quant: Option<&BlockQuantizer<'t>>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let (batch, seq) = batch_layout(&shape, spec.d_model)?;
    let tape = x.tape();
    let c = |t: &Tensor| tape.constant(t.clone());
    let rows = batch * seq;
    let x2 = x.reshape(&[rows, spec.d_model])?;

    let lin = |input: Var<'t>, which: Linear| -> Result<Var<'t>> {
        match quant {
            None => {
                let (wt, bt) = w.linear(which);
                input.matmul(c(wt))?.add(c(bt))
            }
            Some(q) => q.linear(input, w, which),
        }
    };

    let a = nn::layer_norm(x2, c(&w.ln1_gain), c(&w.ln1_shift), LN_EPS)?;
    let (q, k, v) = (lin(a, Linear::Q)?, lin(a, Linear::K)?, lin(a, Linear::V)?);
    let attn = nn::causal_attention(q, k, v, batch, seq, spec.n_heads)?;
    let h = x2.add(lin(attn, Linear::O)?)?;

    let m = nn::layer_norm(h, c(&w.ln2_gain), c(&w.ln2_shift), LN_EPS)?;
    let ff = lin(lin(m, Linear::Fc1)?.gelu()?, Linear::Fc2)?;
    let out = h.add(ff)?;
    if !out.value().all_finite() {
        return Err(Error::NonFinite {
            op: "block_forward",
            phase: crate::Phase::Forward,
        });
    }
    out.reshape(&shape)
}

/// Validates a token batch: all rows the same length, ids below `V`,
/// length within `max_seq_len`.
pub fn check_tokens(tokens: &[Vec<u32>], spec: &ModelSpec) -> Result<(usize, usize)> {
    let batch = tokens.len();
    let seq = tokens.first().map_or(0, Vec::len);
    if batch == 0 || seq == 0 {
        return Err(Error::Usage("empty token batch".into()));
    }
    if tokens.iter().any(|t| t.len() != seq) {
        return Err(Error::Usage("token rows differ in length".into()));
    }
    if seq > spec.max_seq_len {
        return Err(Error::Usage(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            spec.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().flatten().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::Domain {
            op: "model_forward",
            msg: format!("token id {bad} out of range for vocabulary {}", spec.vocab_size),
        });
    }
    Ok((batch, seq))
}

/// Token embeddings as `[B×S×d]`.
pub fn embed<'t>(tape: &'t Tape, tokens: &[Vec<u32>], model: &ModelWeights) -> Result<Var<'t>> {
    let (batch, seq) = check_tokens(tokens, &model.spec)?;
    let ids: Vec<usize> = tokens.iter().flatten().map(|&t| t as usize).collect();
    tape.constant(model.embed.clone())
        .gather_rows(&ids)?
        .reshape(&[batch, seq, model.spec.d_model])
}

/// Final norm and tied-embedding head: `[B×S×d]` → `[B×S×V]`.
pub fn head<'t>(h: Var<'t>, model: &ModelWeights) -> Result<Var<'t>> {
    let shape = h.shape();
    let (batch, seq) = batch_layout(&shape, model.spec.d_model)?;
    let tape = h.tape();
    let flat = h.reshape(&[batch * seq, model.spec.d_model])?;
    let normed = nn::layer_norm(
        flat,
        tape.constant(model.lnf_gain.clone()),
        tape.constant(model.lnf_shift.clone()),
        LN_EPS,
    )?;
    normed
        .matmul(tape.constant(model.embed.transpose()?))?
        .reshape(&[batch, seq, model.spec.vocab_size])
}

/// Embeddings → blocks → final norm → tied head. `quant`, when given,
/// supplies one quantizer per block.
pub fn model_forward<'t>(
    tape: &'t Tape,
    tokens: &[Vec<u32>],
    model: &ModelWeights,
    quant: Option<&[BlockQuantizer<'t>]>,
) -> Result<Var<'t>> {
    if let Some(q) = quant {
        if q.len() != model.blocks.len() {
            return Err(Error::Usage(format!(
                "{} block quantizers for {} blocks",
                q.len(),
                model.blocks.len()
            )));
        }
    }
    let mut h = embed(tape, tokens, model)?;
    for (i, block) in model.blocks.iter().enumerate() {
        h = block_forward(h, block, &model.spec, quant.map(|q| &q[i]))?;
    }
    head(h, model)
}

/// Sum of next-token negative log-likelihoods and the number of predicted
/// positions, for one batch.
pub fn next_token_nll(
    tokens: &[Vec<u32>],
    model: &ModelWeights,
    quant: Option<&QuantState>,
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let quantizers = quant.map(|q| q.constants(&tape)).transpose()?;
    let logits = model_forward(&tape, tokens, model, quantizers.as_deref())?;
    let logp = logits.log_softmax_last()?.value();
    let (seq, vocab) = (tokens[0].len(), model.spec.vocab_size);
    let mut nll = 0.0;
    let mut count = 0;
    for (b, row) in tokens.iter().enumerate() {
        for t in 0..seq.saturating_sub(1) {
            let next = row[t + 1] as usize;
            nll -= logp.data()[(b * seq + t) * vocab + next];
            count += 1;
        }
    }
    Ok((nll, count))
}
