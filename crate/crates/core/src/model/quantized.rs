use serde::{Deserialize, Serialize};

use super::{BlockWeights, ModelWeights};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::quant::{
    fake_quantize, hier_let_token_scale, let_transform, lwc_init, quantize_activations, ActBits,
    HierLetState, LetParams, LetVars, LwcInit, LwcParams, LwcVars, QuantConfig,
};

/// The six linear layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Linear {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl Linear {
    pub const ALL: [Linear; 6] = [Linear::Q, Linear::K, Linear::V, Linear::O, Linear::Fc1, Linear::Fc2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Linear::Q => "attn.q",
            Linear::K => "attn.k",
            Linear::V => "attn.v",
            Linear::O => "attn.o",
            Linear::Fc1 => "mlp.fc1",
            Linear::Fc2 => "mlp.fc2",
        }
    }

    /// The LET site whose transform wraps this layer. q, k and v read the
    /// same normalised input and share one.
    pub fn let_site(self) -> LetSite {
        match self {
            Linear::Q | Linear::K | Linear::V => LetSite::Qkv,
            Linear::O => LetSite::O,
            Linear::Fc1 => LetSite::Fc1,
            Linear::Fc2 => LetSite::Fc2,
        }
    }
}

/// Inputs that carry an equivalent transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LetSite {
    Qkv,
    O,
    Fc1,
    Fc2,
}

impl LetSite {
    pub const ALL: [LetSite; 4] = [LetSite::Qkv, LetSite::O, LetSite::Fc1, LetSite::Fc2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LetSite::Qkv => "attn.qkv",
            LetSite::O => "attn.o",
            LetSite::Fc1 => "mlp.fc1",
            LetSite::Fc2 => "mlp.fc2",
        }
    }

    /// Input width of the layers behind this site.
    pub fn dim(self, w: &BlockWeights) -> usize {
        match self {
            LetSite::Qkv => w.wq.shape()[0],
            LetSite::O => w.wo.shape()[0],
            LetSite::Fc1 => w.w1.shape()[0],
            LetSite::Fc2 => w.w2.shape()[0],
        }
    }
}

fn default_epsilon() -> f64 {
    HierLetState::default().epsilon
}

/// Quantizer configuration for a whole model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSettings {
    pub config: QuantConfig,
    /// `None` picks the default: off for weight-only configs, on when
    /// activations are quantized.
    #[serde(default)]
    pub let_enabled: Option<bool>,
    #[serde(default)]
    pub hier_let: bool,
    #[serde(default = "default_epsilon")]
    pub hier_epsilon: f64,
    #[serde(default)]
    pub lwc_init: LwcInit,
}

impl QuantSettings {
    pub fn new(config: QuantConfig) -> Self {
        Self {
            config,
            let_enabled: None,
            hier_let: false,
            hier_epsilon: default_epsilon(),
            lwc_init: LwcInit::Default,
        }
    }

    pub fn let_active(&self) -> bool {
        self.let_enabled.unwrap_or(self.config.act_bits != ActBits::Full)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.hier_let && !self.let_active() {
            return Err(Error::Config("hierarchical LET requires LET to be enabled".into()));
        }
        if !(self.hier_epsilon > 0.0 && self.hier_epsilon.is_finite()) {
            return Err(Error::Config("hier_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Which optimiser group a trainable tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Lwc,
    Let,
}

/// Learnable quantizer parameters of one block: clipping logits for each
/// linear layer and, when enabled, one LET per site.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockQuantParams {
    pub lwc: Vec<LwcParams>,
    pub lets: Option<Vec<LetParams>>,
}

/// Weight `[in × out]` viewed as `[out × in]` so groups run along the input
/// dimension of each output channel.
fn grouped(w: &Tensor) -> Result<Tensor> {
    w.transpose()
}

impl BlockQuantParams {
    pub fn init(block: &BlockWeights, settings: &QuantSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let lwc = Linear::ALL
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let w = grouped(block.linear(l).0)?;
                lwc_init(&w, &settings.config, settings.lwc_init, seed.wrapping_add(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let lets = settings.let_active().then(|| {
            LetSite::ALL
                .iter()
                .map(|s| LetParams::identity(s.dim(block)))
                .collect()
        });
        Ok(Self { lwc, lets })
    }

    /// Names and tensors relative to the block, as stored in the container.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, p) in Linear::ALL.iter().zip(&self.lwc) {
            out.push((format!("{}.lwc.gamma_raw", l.name()), &p.gamma_raw));
            out.push((format!("{}.lwc.beta_raw", l.name()), &p.beta_raw));
        }
        if let Some(lets) = &self.lets {
            for (s, p) in LetSite::ALL.iter().zip(lets) {
                out.push((format!("{}.let.delta", s.name()), &p.delta));
                out.push((format!("{}.let.s", s.name()), &p.s));
            }
        }
        out
    }

    /// Trainable values in optimiser order. LET scales appear as `ln s`.
    pub fn trainable_values(&self) -> Vec<(ParamKind, Tensor)> {
        let mut out = Vec::new();
        for p in &self.lwc {
            out.push((ParamKind::Lwc, p.gamma_raw.clone()));
            out.push((ParamKind::Lwc, p.beta_raw.clone()));
        }
        for p in self.lets.iter().flatten() {
            out.push((ParamKind::Let, p.delta.clone()));
            out.push((ParamKind::Let, p.s.map(f64::ln)));
        }
        out
    }

    /// Inverse of [`BlockQuantParams::trainable_values`].
    pub fn set_trainable_values(&mut self, values: &[Tensor]) -> Result<()> {
        let expected = 2 * self.lwc.len() + 2 * self.lets.as_ref().map_or(0, Vec::len);
        if values.len() != expected {
            return Err(Error::Usage(format!(
                "{} trainable tensors supplied, {expected} expected",
                values.len()
            )));
        }
        let mut it = values.iter();
        let mut take = |target: &mut Tensor, f: fn(f64) -> f64| -> Result<()> {
            let v = it.next().expect("length checked");
            if v.shape() != target.shape() {
                return Err(Error::Shape(format!(
                    "trainable tensor shape {:?} differs from {:?}",
                    v.shape(),
                    target.shape()
                )));
            }
            *target = v.map(f);
            Ok(())
        };
        for p in &mut self.lwc {
            take(&mut p.gamma_raw, |v| v)?;
            take(&mut p.beta_raw, |v| v)?;
        }
        for p in self.lets.iter_mut().flatten() {
            take(&mut p.delta, |v| v)?;
            take(&mut p.s, f64::exp)?;
        }
        Ok(())
    }

    fn handles<'t>(&self, tape: &'t Tape, settings: &QuantSettings, trainable: bool) -> Result<BlockQuantizer<'t>> {
        settings.validate()?;
        if self.lwc.len() != Linear::ALL.len() {
            return Err(Error::Shape(format!("{} clipping records, expected 6", self.lwc.len())));
        }
        if settings.let_active() != self.lets.is_some() {
            return Err(Error::Config("LET parameters do not match the LET setting".into()));
        }
        let lwc = self
            .lwc
            .iter()
            .map(|p| if trainable { p.vars_trainable(tape) } else { p.constants(tape) })
            .collect();
        let lets = match &self.lets {
            None => None,
            Some(v) if v.len() != LetSite::ALL.len() => {
                return Err(Error::Shape(format!("{} LET records, expected 4", v.len())))
            }
            Some(v) => Some(
                v.iter()
                    .map(|p| if trainable { p.vars_trainable(tape) } else { p.constants(tape) })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(BlockQuantizer {
            settings: *settings,
            lwc,
            lets,
        })
    }

    pub fn constants<'t>(&self, tape: &'t Tape, settings: &QuantSettings) -> Result<BlockQuantizer<'t>> {
        self.handles(tape, settings, false)
    }

    pub fn vars_trainable<'t>(&self, tape: &'t Tape, settings: &QuantSettings) -> Result<BlockQuantizer<'t>> {
        self.handles(tape, settings, true)
    }
}

/// Quantizer parameters for every block of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub settings: QuantSettings,
    pub blocks: Vec<BlockQuantParams>,
}

impl QuantState {
    pub fn init(model: &ModelWeights, settings: &QuantSettings, seed: u64) -> Result<Self> {
        let blocks = model
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BlockQuantParams::init(b, settings, seed.wrapping_add(1000 * i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            settings: *settings,
            blocks,
        })
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> Result<Vec<BlockQuantizer<'t>>> {
        self.blocks
            .iter()
            .map(|b| b.constants(tape, &self.settings))
            .collect()
    }

    /// Container names, e.g. `blocks.0.attn.q.lwc.gamma_raw`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.named()
                    .into_iter()
                    .map(move |(n, t)| (format!("blocks.{i}.{n}"), t))
            })
            .collect()
    }
}

/// Quantizer handles for one block on one tape.
#[derive(Debug, Clone)]
pub struct BlockQuantizer<'t> {
    pub settings: QuantSettings,
    pub lwc: Vec<LwcVars<'t>>,
    pub lets: Option<Vec<LetVars<'t>>>,
}

impl<'t> BlockQuantizer<'t> {
    /// Trainable handles in the order of [`BlockQuantParams::trainable_values`].
    pub fn trainable_vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for v in &self.lwc {
            out.push(v.gamma_raw);
            out.push(v.beta_raw);
        }
        for v in self.lets.iter().flatten() {
            out.push(v.delta);
            out.push(v.log_s);
        }
        out
    }

    /// One quantized linear layer on `[N × in]` input.
    ///
    /// With LET: `x̃ = (x − δ)/s`, `W̃ = diag(s)·W`, `b̃ = b + δ·W`. With the
    /// hierarchical variant the rows are first divided by their token scale,
    /// which is multiplied back onto the layer output before the bias.
    pub fn linear(&self, input: Var<'t>, block: &BlockWeights, which: Linear) -> Result<Var<'t>> {
        let tape = input.tape();
        let (wt, bt) = block.linear(which);
        let cfg = &self.settings.config;
        let mut x = input;
        let mut w = tape.constant(wt.clone());
        let mut bias = tape.constant(bt.clone());
        let mut token_scale = None;
        if let Some(lets) = &self.lets {
            let params = &lets[which.let_site().index()];
            if self.settings.hier_let {
                let state = HierLetState {
                    epsilon: self.settings.hier_epsilon,
                };
                let (x1, s_tok) = hier_let_token_scale(x, &state)?;
                let zero = tape.constant(Tensor::zeros(bt.shape()));
                let out = let_transform(x1, w, zero, params)?;
                x = out.x;
                w = out.w;
                token_scale = Some((s_tok, out.bias));
            } else {
                let out = let_transform(x, w, bias, params)?;
                x = out.x;
                w = out.w;
                bias = out.bias;
            }
        }
        if let ActBits::Bits(b) = cfg.act_bits {
            x = quantize_activations(x, b)?;
        }
        let wq = fake_quantize(w.transpose()?, cfg, &self.lwc[which.index()])?.transpose()?;
        let y = x.matmul(wq)?;
        match token_scale {
            None => y.add(bias),
            Some((s_tok, shift)) => {
                let n = s_tok.numel();
                y.add(shift)?.mul(s_tok.reshape(&[n, 1])?)?.add(bias)
            }
        }
    }
}

/// Folds the channel LET of the sites that directly follow a layer norm
/// (qkv and fc1) into that norm's gain and shift and into the layer
/// weights, leaving identity transforms behind. Not available with the
/// hierarchical variant, whose token scale cannot be folded.
pub fn fold_let_into_norms(
    block: &BlockWeights,
    params: &BlockQuantParams,
    settings: &QuantSettings,
) -> Result<(BlockWeights, BlockQuantParams)> {
    if settings.hier_let {
        return Err(Error::Config("token scales cannot be folded into a layer norm".into()));
    }
    let Some(lets) = &params.lets else {
        return Ok((block.clone(), params.clone()));
    };
    let mut w = block.clone();
    let mut p = params.clone();
    for site in [LetSite::Qkv, LetSite::Fc1] {
        let lp = &lets[site.index()];
        lp.validate()?;
        let (s, delta) = (lp.s.data(), lp.delta.data());
        let (gain, shift) = match site {
            LetSite::Qkv => (&mut w.ln1_gain, &mut w.ln1_shift),
            _ => (&mut w.ln2_gain, &mut w.ln2_shift),
        };
        for c in 0..s.len() {
            gain.data_mut()[c] /= s[c];
            shift.data_mut()[c] = (shift.data()[c] - delta[c]) / s[c];
        }
        let layers: &[Linear] = match site {
            LetSite::Qkv => &[Linear::Q, Linear::K, Linear::V],
            _ => &[Linear::Fc1],
        };
        for &l in layers {
            let (wm, bv) = match l {
                Linear::Q => (&mut w.wq, &mut w.bq),
                Linear::K => (&mut w.wk, &mut w.bk),
                Linear::V => (&mut w.wv, &mut w.bv),
                _ => (&mut w.w1, &mut w.b1),
            };
            let m = wm.shape()[1];
            for (&dc, row) in delta.iter().zip(wm.data().chunks(m)) {
                for (b, &wv) in bv.data_mut().iter_mut().zip(row) {
                    *b += dc * wv;
                }
            }
            for (&sc, row) in s.iter().zip(wm.data_mut().chunks_mut(m)) {
                row.iter_mut().for_each(|v| *v *= sc);
            }
        }
        p.lets.as_mut().expect("checked")[site.index()] = LetParams::identity(s.len());
    }
    Ok((w, p))
}
