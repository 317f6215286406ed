//! `SWQ1` weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "SWQ1"
//! version  u32
//! count    u64
//! count × { name_len u32, name UTF-8, rank u32, dims u64 × rank, offset u64 }
//! payload  f64 values; each entry's offset is in bytes from the payload start
//! ```
//!
//! The model spec and quantizer settings live in a JSON sidecar sharing the
//! container's basename.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlockQuantParams, BlockWeights, LetSite, Linear, ModelSpec, ModelWeights, QuantSettings, QuantState};
use crate::diffcore::Tensor;
use crate::error::{ContainerError, Error, Result};
use crate::quant::{LetParams, LwcParams};

pub const CONTAINER_MAGIC: [u8; 4] = *b"SWQ1";
pub const CONTAINER_VERSION: u32 = 1;

/// Ordered named tensors, the unit a container stores.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_container(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(ContainerError::Malformed(format!("duplicate tensor name {name}")).into());
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ContainerError::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<NamedTensors, ContainerError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CONTAINER_MAGIC {
        return Err(ContainerError::BadMagic {
            expected: CONTAINER_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(ContainerError::VersionMismatch {
            expected: CONTAINER_VERSION,
            found: version,
        });
    }
    let count = r.u64("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| ContainerError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64("offset")?;
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ContainerError::Malformed(format!("{name}: size overflows")))?;
        let end = offset
            .checked_add(numel)
            .ok_or_else(|| ContainerError::Malformed(format!("{name}: offset overflows")))?;
        entries.push((name, dims, offset, end));
    }
    let payload = &bytes[r.pos..];

    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .filter(|e| e.3 > e.2)
        .map(|e| (e.2, e.3, e.0.as_str()))
        .collect();
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(ContainerError::OverlappingOffsets {
                first: pair[0].2.to_string(),
                second: pair[1].2.to_string(),
            });
        }
    }
    let needed = entries.iter().map(|e| e.3).max().unwrap_or(0);
    if (payload.len() as u64) < needed {
        return Err(ContainerError::Truncated(format!(
            "payload holds {} bytes, manifest needs {needed}",
            payload.len()
        )));
    }
    if payload.len() as u64 != needed {
        return Err(ContainerError::Malformed(format!(
            "{} trailing bytes after the payload",
            payload.len() as u64 - needed
        )));
    }

    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(entries.len());
    for (name, dims, offset, end) in entries {
        if !seen.insert(name.clone()) {
            return Err(ContainerError::Malformed(format!("duplicate tensor name {name}")));
        }
        let data = payload[offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| ContainerError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_container(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, write_container(tensors)?)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<NamedTensors> {
    Ok(read_container(&fs::read(path)?)?)
}

/// JSON sidecar next to a model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    spec: ModelSpec,
    #[serde(default)]
    quant: Option<QuantSettings>,
}

/// A model and optionally its calibrated quantizer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: ModelWeights,
    pub quant: Option<QuantState>,
}

impl SavedModel {
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    pub fn to_named(&self) -> NamedTensors {
        let m = &self.model;
        let mut out: NamedTensors = vec![("embed".into(), m.embed.clone())];
        for (i, b) in m.blocks.iter().enumerate() {
            for (n, t) in b.named() {
                out.push((format!("blocks.{i}.{n}"), t.clone()));
            }
        }
        out.push(("lnf.gain".into(), m.lnf_gain.clone()));
        out.push(("lnf.shift".into(), m.lnf_shift.clone()));
        if let Some(q) = &self.quant {
            out.extend(q.named().into_iter().map(|(n, t)| (n, t.clone())));
        }
        out
    }

    pub fn from_named(
        spec: ModelSpec,
        settings: Option<QuantSettings>,
        tensors: NamedTensors,
    ) -> Result<Self> {
        spec.validate()?;
        let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Container(ContainerError::Malformed(format!("missing tensor {name}"))))
        };
        let embed = take("embed")?;
        let mut blocks = Vec::new();
        for i in 0..spec.n_blocks {
            let mut t = |n: &str| take(&format!("blocks.{i}.{n}"));
            blocks.push(BlockWeights {
                ln1_gain: t("ln1.gain")?,
                ln1_shift: t("ln1.shift")?,
                wq: t("attn.q.weight")?,
                bq: t("attn.q.bias")?,
                wk: t("attn.k.weight")?,
                bk: t("attn.k.bias")?,
                wv: t("attn.v.weight")?,
                bv: t("attn.v.bias")?,
                wo: t("attn.o.weight")?,
                bo: t("attn.o.bias")?,
                ln2_gain: t("ln2.gain")?,
                ln2_shift: t("ln2.shift")?,
                w1: t("mlp.fc1.weight")?,
                b1: t("mlp.fc1.bias")?,
                w2: t("mlp.fc2.weight")?,
                b2: t("mlp.fc2.bias")?,
            });
        }
        let model = ModelWeights {
            spec,
            embed,
            blocks,
            lnf_gain: take("lnf.gain")?,
            lnf_shift: take("lnf.shift")?,
        };
        model.validate()?;
        let quant = match settings {
            None => None,
            Some(settings) => {
                settings.validate()?;
                let mut blocks = Vec::new();
                for i in 0..spec.n_blocks {
                    let mut t = |n: String| take(&format!("blocks.{i}.{n}"));
                    let lwc = Linear::ALL
                        .iter()
                        .map(|l| {
                            Ok(LwcParams {
                                gamma_raw: t(format!("{}.lwc.gamma_raw", l.name()))?,
                                beta_raw: t(format!("{}.lwc.beta_raw", l.name()))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let lets = if settings.let_active() {
                        Some(
                            LetSite::ALL
                                .iter()
                                .map(|s| {
                                    LetParams::new(
                                        t(format!("{}.let.delta", s.name()))?,
                                        t(format!("{}.let.s", s.name()))?,
                                    )
                                })
                                .collect::<Result<Vec<_>>>()?,
                        )
                    } else {
                        None
                    };
                    blocks.push(BlockQuantParams { lwc, lets });
                }
                Some(QuantState { settings, blocks })
            }
        };
        if let Some(extra) = map.keys().min() {
            return Err(ContainerError::Malformed(format!("unexpected tensor {extra}")).into());
        }
        Ok(Self { model, quant })
    }
}

/// Writes the container at `path` and the JSON sidecar beside it.
pub fn save_model(path: &Path, saved: &SavedModel) -> Result<()> {
    let sidecar = Sidecar {
        spec: saved.model.spec,
        quant: saved.quant.as_ref().map(|q| q.settings),
    };
    save_container(path, &saved.to_named())?;
    fs::write(SavedModel::sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(SavedModel::sidecar_path(path))?)?;
    SavedModel::from_named(sidecar.spec, sidecar.quant, load_container(path)?)
}
