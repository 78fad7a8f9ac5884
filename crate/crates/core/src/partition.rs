//! Keyed vocabulary partition: deterministic hashing of single-token context
//! and the green/red split every other module consumes.
//!
//! The mix is pinned bit-exactly so golden vectors survive reimplementation
//! in other languages: two rounds of the splitmix64 finalizer applied to
//! `seed XOR (x · 0x9E3779B97F4A7C15)`. Green membership compares the raw
//! 64-bit score against `floor(gamma · 2^64)` as integers, so no platform
//! float behavior can leak into the partition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitset::Bitset;

/// Version tag for the pinned hash scheme. Bump if the mix ever changes.
pub const SCHEME_VERSION: u32 = 1;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_C1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_C2: u64 = 0x94D0_49BB_1331_11EB;

#[derive(Debug, Error, PartialEq)]
pub enum KeyError {
    #[error("gamma must lie strictly in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("delta must be finite and non-negative, got {0}")]
    InvalidDelta(f64),
    #[error("unsupported scheme version {0} (this build implements {SCHEME_VERSION})")]
    UnsupportedScheme(u32),
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(u32),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: u32 },
    #[error("malformed key file: {0}")]
    MalformedKeyFile(String),
}

/// Index into the vocabulary, `0 <= value < |V|`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// 64-bit context digest `h = mix(seed, prev)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContextHash(pub u64);

/// One round of the splitmix64 finalizer (no increment step).
#[inline]
fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_C1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_C2);
    z ^ (z >> 31)
}

/// Keyed avalanche mix: two finalizer rounds over `seed ^ (x · GOLDEN)`.
///
/// This single function defines both hash stages: context hashing uses
/// `mix64(key_seed, prev)` and token scoring uses `mix64(context_hash, v)`.
#[inline]
pub fn mix64(seed: u64, x: u64) -> u64 {
    splitmix_finalize(splitmix_finalize(seed ^ x.wrapping_mul(GOLDEN)))
}

/// Raw 64-bit token score for a given context hash.
#[inline]
pub fn uniform_score_bits(h: ContextHash, v: TokenId) -> u64 {
    mix64(h.0, v.0 as u64)
}

/// Token score projected into `[0, 1)` with 53-bit precision.
///
/// Convenience view for uniformity diagnostics; green membership always goes
/// through the integer comparison, never through this projection.
#[inline]
pub fn uniform_score(h: ContextHash, v: TokenId) -> f64 {
    (uniform_score_bits(h, v) >> 11) as f64 / (1u64 << 53) as f64
}

/// Secret seed plus partition parameters. `gamma` is the green fraction,
/// `delta` the logit bonus applied by the bias strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    seed: u64,
    gamma: f64,
    delta: f64,
    scheme_version: u32,
}

impl WatermarkKey {
    pub fn new(seed: u64, gamma: f64, delta: f64) -> Result<Self, KeyError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(KeyError::InvalidGamma(gamma));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(KeyError::InvalidDelta(delta));
        }
        Ok(WatermarkKey {
            seed,
            gamma,
            delta,
            scheme_version: SCHEME_VERSION,
        })
    }

    #[inline]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn scheme_version(&self) -> u32 {
        self.scheme_version
    }

    /// Green threshold as an integer: `floor(gamma · 2^64)`.
    ///
    /// `gamma · 2^64` is exact in f64 (a pure exponent shift), so the cast
    /// introduces no rounding beyond gamma's own representation.
    #[inline]
    pub fn green_threshold(&self) -> u128 {
        (self.gamma * 18_446_744_073_709_551_616.0) as u128
    }

    /// Digest of the partition-relevant fields (seed, gamma, scheme version).
    ///
    /// `delta` is deliberately excluded: it does not affect green sets, so
    /// one matrix serves a whole delta sweep.
    pub fn fingerprint(&self) -> u64 {
        let a = mix64(self.seed, self.gamma.to_bits());
        mix64(a, self.scheme_version as u64)
    }

    /// Flat text record: one `name = value` line per field.
    pub fn to_key_file(&self) -> String {
        format!(
            "seed = {}\ngamma = {}\ndelta = {}\nscheme_version = {}\n",
            self.seed, self.gamma, self.delta, self.scheme_version
        )
    }

    pub fn from_key_file(text: &str) -> Result<Self, KeyError> {
        let mut seed = None;
        let mut gamma = None;
        let mut delta = None;
        let mut scheme = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line
                .split_once('=')
                .ok_or_else(|| KeyError::MalformedKeyFile(format!("line {}", lineno + 1)))?;
            let (name, value) = (name.trim(), value.trim());
            let bad = || KeyError::MalformedKeyFile(format!("bad value for {name}"));
            match name {
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
                "gamma" => gamma = Some(value.parse::<f64>().map_err(|_| bad())?),
                "delta" => delta = Some(value.parse::<f64>().map_err(|_| bad())?),
                "scheme_version" => scheme = Some(value.parse::<u32>().map_err(|_| bad())?),
                other => {
                    return Err(KeyError::MalformedKeyFile(format!("unknown field {other}")))
                }
            }
        }
        let missing = |f: &str| KeyError::MalformedKeyFile(format!("missing field {f}"));
        let scheme = scheme.ok_or_else(|| missing("scheme_version"))?;
        if scheme != SCHEME_VERSION {
            return Err(KeyError::UnsupportedScheme(scheme));
        }
        WatermarkKey::new(
            seed.ok_or_else(|| missing("seed"))?,
            gamma.ok_or_else(|| missing("gamma"))?,
            delta.ok_or_else(|| missing("delta"))?,
        )
    }
}

/// A key bound to a concrete vocabulary size, with the green threshold
/// precomputed. All methods are pure; the struct is freely shareable.
#[derive(Debug, Clone)]
pub struct KeyedPartition {
    key: WatermarkKey,
    vocab_size: u32,
    threshold: u128,
}

impl KeyedPartition {
    pub fn new(key: WatermarkKey, vocab_size: u32) -> Result<Self, KeyError> {
        if vocab_size < 2 {
            return Err(KeyError::VocabTooSmall(vocab_size));
        }
        Ok(KeyedPartition {
            key,
            vocab_size,
            threshold: key.green_threshold(),
        })
    }

    #[inline]
    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }

    #[inline]
    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Context hash `h = mix(seed, prev)` for a single-token context.
    pub fn hash_context(&self, prev: TokenId) -> Result<ContextHash, KeyError> {
        if prev.0 >= self.vocab_size {
            return Err(KeyError::TokenOutOfRange {
                token: prev.0,
                vocab_size: self.vocab_size,
            });
        }
        Ok(ContextHash(mix64(self.key.seed, prev.0 as u64)))
    }

    /// Green membership: `score(h(seed, prev), v) < floor(gamma · 2^64)`,
    /// strict inequality.
    #[inline]
    pub fn is_green(&self, prev: TokenId, v: TokenId) -> bool {
        let h = mix64(self.key.seed, prev.0 as u64);
        (mix64(h, v.0 as u64) as u128) < self.threshold
    }

    /// Full green mask for one context: bit `v` set iff `is_green(prev, v)`.
    pub fn green_set(&self, prev: TokenId) -> Bitset {
        let h = mix64(self.key.seed, prev.0 as u64);
        let n = self.vocab_size as usize;
        let mut words = vec![0u64; n.div_ceil(64)];
        for v in 0..n {
            if (mix64(h, v as u64) as u128) < self.threshold {
                words[v / 64] |= 1u64 << (v % 64);
            }
        }
        Bitset::from_words(words, n)
    }
}
