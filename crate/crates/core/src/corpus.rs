//! Synthetic token corpora and the `SWC1` corpus file.
//!
//! ```text
//! magic    4 bytes  "SWC1"
//! version  u32
//! vocab    u64
//! count    u64
//! tokens   u32 × count
//! ```
//!
//! All integers are little-endian.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{ContainerError, Error, Result};

pub const CORPUS_MAGIC: [u8; 4] = *b"SWC1";
pub const CORPUS_VERSION: u32 = 1;

/// Zipf exponent of the mixed corpus.
pub const ZIPF_EXPONENT: f64 = 1.1;
/// Probability that the mixed generator emits a stored phrase instead of a
/// single token.
pub const PHRASE_PROBABILITY: f64 = 0.3;
const PHRASE_BANK: usize = 32;
const PHRASE_LEN: std::ops::RangeInclusive<usize> = 4..=12;

/// Generator family.
///
/// `Uniform` draws i.i.d. ids. `Mixed` draws ids from a Zipf law and, with
/// probability [`PHRASE_PROBABILITY`], splices in one of a fixed bank of
/// Zipf-sampled phrases, giving both a skewed unigram histogram and
/// repeated n-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Uniform,
    Mixed,
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Uniform => "uniform",
            CorpusKind::Mixed => "mixed",
        })
    }
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(CorpusKind::Uniform),
            "mixed" => Ok(CorpusKind::Mixed),
            _ => Err(Error::Config(format!("unknown corpus kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    vocab: u64,
    tokens: Vec<u32>,
}

impl Corpus {
    pub fn new(vocab: u64, tokens: Vec<u32>) -> Result<Self> {
        if vocab == 0 || vocab > u32::MAX as u64 + 1 {
            return Err(Error::Config(format!("vocabulary size {vocab} out of range")));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as u64 >= vocab) {
            return Err(Error::Domain {
                op: "corpus",
                msg: format!("token id {bad} out of range for vocabulary {vocab}"),
            });
        }
        Ok(Self { vocab, tokens })
    }

    pub fn generate(kind: CorpusKind, vocab: u64, count: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || count == 0 {
            return Err(Error::Config("corpus needs vocab >= 1 and tokens >= 1".into()));
        }
        if vocab > u32::MAX as u64 {
            return Err(Error::Config(format!("vocabulary size {vocab} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = match kind {
            CorpusKind::Uniform => (0..count).map(|_| rng.random_range(0..vocab as u32)).collect(),
            CorpusKind::Mixed => {
                let zipf = Zipf::new(vocab as f64, ZIPF_EXPONENT)
                    .map_err(|e| Error::Config(format!("zipf law: {e}")))?;
                let draw = |rng: &mut ChaCha8Rng| zipf.sample(rng) as u32 - 1;
                let phrases: Vec<Vec<u32>> = (0..PHRASE_BANK)
                    .map(|_| {
                        let len = rng.random_range(PHRASE_LEN);
                        (0..len).map(|_| draw(&mut rng)).collect()
                    })
                    .collect();
                let mut out = Vec::with_capacity(count + *PHRASE_LEN.end());
                while out.len() < count {
                    if rng.random_bool(PHRASE_PROBABILITY) {
                        out.extend_from_slice(&phrases[rng.random_range(0..PHRASE_BANK)]);
                    } else {
                        out.push(draw(&mut rng));
                    }
                }
                out.truncate(count);
                out
            }
        };
        Ok(Self { vocab, tokens })
    }

    pub fn vocab(&self) -> u64 {
        self.vocab
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token counts per id.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.vocab as usize];
        for &t in &self.tokens {
            h[t as usize] += 1;
        }
        h
    }

    /// `n` windows of `seq_len` tokens at seeded random offsets.
    pub fn sample_windows(&self, seq_len: usize, n: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
        if seq_len == 0 || seq_len > self.tokens.len() {
            return Err(Error::Config(format!(
                "cannot cut windows of {seq_len} tokens from a corpus of {}",
                self.tokens.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self.tokens.len() - seq_len;
        Ok((0..n)
            .map(|_| {
                let start = rng.random_range(0..=last);
                self.tokens[start..start + seq_len].to_vec()
            })
            .collect())
    }

    /// Consecutive non-overlapping windows, at most `limit` of them. A
    /// trailing partial window is dropped.
    pub fn windows(&self, seq_len: usize, limit: Option<usize>) -> Vec<Vec<u32>> {
        if seq_len == 0 {
            return Vec::new();
        }
        self.tokens
            .chunks_exact(seq_len)
            .take(limit.unwrap_or(usize::MAX))
            .map(<[u32]>::to_vec)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.tokens.len());
        out.extend_from_slice(&CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |range: std::ops::Range<usize>, what: &str| {
            bytes
                .get(range)
                .ok_or_else(|| ContainerError::Truncated(format!("corpus {what}")))
        };
        let magic: [u8; 4] = header(0..4, "magic")?.try_into().expect("4 bytes");
        if magic != CORPUS_MAGIC {
            return Err(ContainerError::BadMagic {
                expected: CORPUS_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = u32::from_le_bytes(header(4..8, "version")?.try_into().expect("4 bytes"));
        if version != CORPUS_VERSION {
            return Err(ContainerError::VersionMismatch {
                expected: CORPUS_VERSION,
                found: version,
            }
            .into());
        }
        let vocab = u64::from_le_bytes(header(8..16, "vocab")?.try_into().expect("8 bytes"));
        let count = u64::from_le_bytes(header(16..24, "count")?.try_into().expect("8 bytes"));
        let body = &bytes[24..];
        let needed = count
            .checked_mul(4)
            .ok_or_else(|| ContainerError::Malformed("token count overflows".into()))?;
        if (body.len() as u64) < needed {
            return Err(ContainerError::Truncated(format!(
                "corpus holds {} token bytes, header promises {needed}",
                body.len()
            ))
            .into());
        }
        if body.len() as u64 != needed {
            return Err(ContainerError::Malformed("trailing bytes after the corpus".into()).into());
        }
        let tokens = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(vocab, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        for kind in [CorpusKind::Uniform, CorpusKind::Mixed] {
            let a = Corpus::generate(kind, 64, 5000, 3).unwrap();
            assert_eq!(a.to_bytes(), Corpus::generate(kind, 64, 5000, 3).unwrap().to_bytes());
            assert_ne!(a, Corpus::generate(kind, 64, 5000, 4).unwrap());
            assert_eq!(a.len(), 5000);
            assert!(a.tokens().iter().all(|&t| t < 64));
        }
    }

    #[test]
    fn mixed_is_skewed() {
        let v = 256;
        let c = Corpus::generate(CorpusKind::Mixed, v, 20_000, 1).unwrap();
        let top = *c.histogram().iter().max().unwrap() as f64 / c.len() as f64;
        assert!(top > 5.0 / v as f64, "{top}");
        let u = Corpus::generate(CorpusKind::Uniform, v, 20_000, 1).unwrap();
        let top_u = *u.histogram().iter().max().unwrap() as f64 / u.len() as f64;
        assert!(top > 3.0 * top_u);
    }

    #[test]
    fn byte_round_trip() {
        let c = Corpus::generate(CorpusKind::Mixed, 100, 777, 9).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SWC1");
        let back = Corpus::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn format_errors() {
        let bytes = Corpus::generate(CorpusKind::Uniform, 10, 20, 0).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Corpus::from_bytes(&bad), Err(Error::Container(ContainerError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Corpus::from_bytes(&bad), Err(Error::Container(ContainerError::VersionMismatch { .. }))));
        assert!(matches!(Corpus::from_bytes(&bytes[..30]), Err(Error::Container(ContainerError::Truncated(_)))));
        let mut bad = bytes;
        bad[24..28].copy_from_slice(&10u32.to_le_bytes());
        assert!(matches!(Corpus::from_bytes(&bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn windows() {
        let c = Corpus::new(10, (0..10).collect()).unwrap();
        assert_eq!(c.windows(4, None), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        assert_eq!(c.windows(4, Some(1)).len(), 1);
        let w = c.sample_windows(3, 5, 0).unwrap();
        assert!(w.iter().all(|s| s.len() == 3 && s[1] == s[0] + 1));
        assert!(c.sample_windows(11, 1, 0).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("mixed".parse::<CorpusKind>().unwrap(), CorpusKind::Mixed);
        assert_eq!(CorpusKind::Uniform.to_string(), "uniform");
        assert!("wikitext".parse::<CorpusKind>().is_err());
    }
}
