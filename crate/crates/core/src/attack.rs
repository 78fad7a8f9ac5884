//! Token-level robustness attacks at configurable edit rates, plus the
//! interface for plugging in an external paraphraser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::partition::TokenId;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack input is empty")]
    EmptyInput,
    #[error("edit rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("external attack selected but no transformer is registered")]
    NoExternalTransformer,
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Delete,
    Insert,
    Swap,
    Substitute,
    External,
}

impl AttackKind {
    pub const EDITS: [AttackKind; 4] = [
        AttackKind::Delete,
        AttackKind::Insert,
        AttackKind::Swap,
        AttackKind::Substitute,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Delete => "delete",
            AttackKind::Insert => "insert",
            AttackKind::Swap => "swap",
            AttackKind::Substitute => "substitute",
            AttackKind::External => "external",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delete" => Ok(AttackKind::Delete),
            "insert" => Ok(AttackKind::Insert),
            "swap" => Ok(AttackKind::Swap),
            "substitute" => Ok(AttackKind::Substitute),
            "external" => Ok(AttackKind::External),
            other => Err(format!(
                "unknown attack {other:?} (expected delete, insert, swap, substitute, or external)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub rate: f64,
    pub rng_seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, rate: f64, rng_seed: u64) -> Result<Self, AttackError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AttackError::InvalidRate(rate));
        }
        Ok(AttackSpec {
            kind,
            rate,
            rng_seed,
        })
    }
}

/// Attack output. `no_edit` flags the degenerate case `floor(rate * n) == 0`
/// where the input passes through unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackOutcome {
    pub tokens: Vec<TokenId>,
    pub no_edit: bool,
}

/// Text-to-text transformer slot for paraphrase-style attacks. Nothing is
/// shipped; callers register their own.
pub trait ExternalTransform: Send + Sync {
    fn transform(&self, tokens: &[TokenId]) -> Vec<TokenId>;
}

pub fn apply(
    spec: &AttackSpec,
    tokens: &[TokenId],
    vocab_size: u32,
) -> Result<AttackOutcome, AttackError> {
    apply_with_external(spec, tokens, vocab_size, None)
}

pub fn apply_with_external(
    spec: &AttackSpec,
    tokens: &[TokenId],
    vocab_size: u32,
    external: Option<&dyn ExternalTransform>,
) -> Result<AttackOutcome, AttackError> {
    if tokens.is_empty() {
        return Err(AttackError::EmptyInput);
    }
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(AttackError::InvalidRate(spec.rate));
    }
    if vocab_size < 2 {
        return Err(AttackError::VocabTooSmall(vocab_size));
    }
    if spec.kind == AttackKind::External {
        let t = external.ok_or(AttackError::NoExternalTransformer)?;
        return Ok(AttackOutcome {
            tokens: t.transform(tokens),
            no_edit: false,
        });
    }

    let n = tokens.len();
    let edits = (spec.rate * n as f64).floor() as usize;
    if edits == 0 {
        return Ok(AttackOutcome {
            tokens: tokens.to_vec(),
            no_edit: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut out = tokens.to_vec();
    match spec.kind {
        AttackKind::Delete => {
            let mut victims = rand::seq::index::sample(&mut rng, n, edits).into_vec();
            victims.sort_unstable_by(|a, b| b.cmp(a));
            for i in victims {
                out.remove(i);
            }
        }
        AttackKind::Insert => {
            for _ in 0..edits {
                let at = rng.random_range(0..=out.len());
                let tok = TokenId(rng.random_range(0..vocab_size));
                out.insert(at, tok);
            }
        }
        AttackKind::Swap => {
            // `edits >= 1` implies `n >= 2` since rate < 1.
            for _ in 0..edits {
                loop {
                    let i = rng.random_range(0..n);
                    let j = rng.random_range(0..n);
                    if i != j {
                        out.swap(i, j);
                        break;
                    }
                }
            }
        }
        AttackKind::Substitute => {
            let mut victims = rand::seq::index::sample(&mut rng, n, edits).into_vec();
            victims.sort_unstable();
            for i in victims {
                loop {
                    let tok = TokenId(rng.random_range(0..vocab_size));
                    if tok != out[i] {
                        out[i] = tok;
                        break;
                    }
                }
            }
        }
        AttackKind::External => unreachable!(),
    }
    Ok(AttackOutcome {
        tokens: out,
        no_edit: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn seq(n: usize) -> Vec<TokenId> {
        (0..n).map(|i| TokenId((i % 50) as u32)).collect()
    }

    fn multiset(tokens: &[TokenId]) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for t in tokens {
            *m.entry(t.0).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn zero_rate_is_identity_with_flag() {
        let input = seq(40);
        for kind in AttackKind::EDITS {
            let spec = AttackSpec::new(kind, 0.0, 1).unwrap();
            let out = apply(&spec, &input, 64).unwrap();
            assert!(out.no_edit);
            assert_eq!(out.tokens, input);
        }
    }

    #[test]
    fn sub_single_edit_rate_is_identity() {
        // rate * n < 1: unchanged with the warning flag set.
        let input = seq(9);
        let spec = AttackSpec::new(AttackKind::Delete, 0.1, 1).unwrap();
        let out = apply(&spec, &input, 64).unwrap();
        assert!(out.no_edit);
        assert_eq!(out.tokens, input);
    }

    #[test]
    fn length_contracts() {
        let input = seq(200);
        let cases = [
            (AttackKind::Delete, 160usize),
            (AttackKind::Insert, 240),
            (AttackKind::Swap, 200),
            (AttackKind::Substitute, 200),
        ];
        for (kind, expect_len) in cases {
            let spec = AttackSpec::new(kind, 0.2, 7).unwrap();
            let out = apply(&spec, &input, 64).unwrap();
            assert_eq!(out.tokens.len(), expect_len, "kind {kind}");
            assert!(!out.no_edit);
        }
    }

    #[test]
    fn swap_preserves_multiset() {
        let input = seq(100);
        let spec = AttackSpec::new(AttackKind::Swap, 0.2, 3).unwrap();
        let out = apply(&spec, &input, 64).unwrap();
        assert_eq!(multiset(&input), multiset(&out.tokens));
        assert_ne!(input, out.tokens);
    }

    #[test]
    fn substitute_changes_exactly_floor_rate_n_positions() {
        let input = seq(100);
        let spec = AttackSpec::new(AttackKind::Substitute, 0.13, 5).unwrap();
        let out = apply(&spec, &input, 1000).unwrap();
        let changed = input
            .iter()
            .zip(&out.tokens)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 13);
    }

    #[test]
    fn deterministic_per_seed() {
        let input = seq(120);
        for kind in AttackKind::EDITS {
            let spec = AttackSpec::new(kind, 0.15, 99).unwrap();
            let a = apply(&spec, &input, 64).unwrap();
            let b = apply(&spec, &input, 64).unwrap();
            assert_eq!(a, b, "kind {kind}");
            let other = AttackSpec::new(kind, 0.15, 100).unwrap();
            let c = apply(&other, &input, 64).unwrap();
            assert_ne!(a.tokens, c.tokens, "kind {kind} should vary with seed");
        }
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            AttackSpec::new(AttackKind::Delete, 1.0, 0),
            Err(AttackError::InvalidRate(_))
        ));
        let spec = AttackSpec::new(AttackKind::Delete, 0.5, 0).unwrap();
        assert!(matches!(
            apply(&spec, &[], 64),
            Err(AttackError::EmptyInput)
        ));
        let ext = AttackSpec::new(AttackKind::External, 0.0, 0).unwrap();
        assert!(matches!(
            apply(&ext, &seq(10), 64),
            Err(AttackError::NoExternalTransformer)
        ));
    }

    #[test]
    fn external_transformer_pass_through() {
        struct Reverser;
        impl ExternalTransform for Reverser {
            fn transform(&self, tokens: &[TokenId]) -> Vec<TokenId> {
                tokens.iter().rev().copied().collect()
            }
        }
        let spec = AttackSpec::new(AttackKind::External, 0.0, 0).unwrap();
        let input = seq(10);
        let out = apply_with_external(&spec, &input, 64, Some(&Reverser)).unwrap();
        assert_eq!(out.tokens[0], input[9]);
        assert!(!out.no_edit);
    }
}
