use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation precision: a bit width, or unquantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActBits {
    Full,
    Bits(u8),
}

/// How values share quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSize {
    /// One group for the whole tensor.
    PerTensor,
    /// One group per output channel (a full row of the grouped layout).
    PerChannel,
    /// Contiguous groups of this many values along the grouped axis.
    Size(usize),
}

/// Quantizer settings, written as a tag such as `W2A16g128`.
///
/// Tag grammar: `W<bits>A<bits|16>[g<size>|gT][sym]`. `A16` means
/// unquantized activations, no `g` suffix means per-channel grouping and
/// `gT` means a single per-tensor group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: ActBits,
    pub group_size: GroupSize,
    pub symmetric: bool,
}

impl QuantConfig {
    pub fn new(weight_bits: u8, act_bits: ActBits, group_size: GroupSize) -> Result<Self> {
        let cfg = Self {
            weight_bits,
            act_bits,
            group_size,
            symmetric: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.weight_bits) {
            return Err(Error::Config(format!(
                "weight bits must be in 1..=8, got {}",
                self.weight_bits
            )));
        }
        if let ActBits::Bits(b) = self.act_bits {
            if !(1..=8).contains(&b) {
                return Err(Error::Config(format!("activation bits must be in 1..=8 or 16, got {b}")));
            }
        }
        if self.group_size == GroupSize::Size(0) {
            return Err(Error::Config("group size must be positive".into()));
        }
        Ok(())
    }

    pub fn quantizes_activations(&self) -> bool {
        matches!(self.act_bits, ActBits::Bits(_))
    }

    /// Group length for a tensor whose grouped axis (last axis) has length
    /// `axis_len` and which holds `numel` values in total.
    pub fn group_len(&self, axis_len: usize, numel: usize) -> Result<usize> {
        let g = match self.group_size {
            GroupSize::PerTensor => numel,
            GroupSize::PerChannel => axis_len,
            GroupSize::Size(g) => {
                if !axis_len.is_multiple_of(g) {
                    return Err(Error::Config(format!(
                        "group size {g} does not divide axis length {axis_len}"
                    )));
                }
                g
            }
        };
        if g == 0 {
            return Err(Error::Config("empty quantization group".into()));
        }
        Ok(g)
    }

    pub fn n_groups(&self, shape: &[usize]) -> Result<usize> {
        let numel: usize = shape.iter().product();
        let axis_len = *shape.last().ok_or_else(|| Error::Config("cannot group a scalar".into()))?;
        Ok(numel / self.group_len(axis_len, numel)?)
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}", self.weight_bits)?;
        match self.act_bits {
            ActBits::Full => write!(f, "A16")?,
            ActBits::Bits(b) => write!(f, "A{b}")?,
        }
        match self.group_size {
            GroupSize::PerTensor => write!(f, "gT")?,
            GroupSize::PerChannel => {}
            GroupSize::Size(g) => write!(f, "g{g}")?,
        }
        if self.symmetric {
            write!(f, "sym")?;
        }
        Ok(())
    }
}

fn split_digits(s: &str) -> (&str, &str) {
    let end = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    s.split_at(end)
}

impl FromStr for QuantConfig {
    type Err = Error;

    fn from_str(tag: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed quantization tag {tag:?}"));
        let rest = tag.strip_prefix('W').ok_or_else(bad)?;
        let (w, rest) = split_digits(rest);
        let rest = rest.strip_prefix('A').ok_or_else(bad)?;
        let (a, mut rest) = split_digits(rest);
        let weight_bits: u8 = w.parse().map_err(|_| bad())?;
        let act_bits = match a.parse::<u8>().map_err(|_| bad())? {
            16 => ActBits::Full,
            b => ActBits::Bits(b),
        };
        let mut group_size = GroupSize::PerChannel;
        if let Some(g) = rest.strip_prefix('g') {
            if let Some(r) = g.strip_prefix('T') {
                group_size = GroupSize::PerTensor;
                rest = r;
            } else {
                let (digits, r) = split_digits(g);
                group_size = GroupSize::Size(digits.parse().map_err(|_| bad())?);
                rest = r;
            }
        }
        let symmetric = match rest {
            "" => false,
            "sym" => true,
            _ => return Err(bad()),
        };
        let cfg = Self {
            weight_bits,
            act_bits,
            group_size,
            symmetric,
        };
        cfg.validate()?;
        // reject non-canonical spellings such as leading zeros
        if cfg.to_string() != tag {
            return Err(bad());
        }
        Ok(cfg)
    }
}

impl Serialize for QuantConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuantConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tag = String::deserialize(d)?;
        tag.parse().map_err(serde::de::Error::custom)
    }
}
