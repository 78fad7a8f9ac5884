//! Run configuration and its flat `name = value` file format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, AttackSpec};
use crate::harness::HarnessError;
use crate::partition::{KeyError, WatermarkKey};
use crate::strategy::StrategyKind;
use crate::toy::Sampler;

/// Everything one end-to-end run needs. All randomness flows through the
/// three named seeds (model, corpus, attack), so a config file pins the run
/// byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // model
    pub vocab_size: u32,
    pub model_seed: u64,
    pub backward_weight: f64,
    // generation
    pub n: usize,
    pub steps: u32,
    pub block_size: usize,
    pub temperature: f64,
    // watermark
    pub strategy: StrategyKind,
    pub seed: u64,
    pub gamma: f64,
    pub delta: f64,
    // corpus
    pub samples: usize,
    pub prompt_len: usize,
    pub corpus_seed: u64,
    // attack (optional)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackKind>,
    pub attack_rate: f64,
    pub attack_seed: u64,
    // output
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab_size: 4096,
            model_seed: 1,
            backward_weight: 0.7,
            n: 200,
            steps: 100,
            block_size: 50,
            temperature: 1.25,
            strategy: StrategyKind::PredictiveBidirectional,
            seed: 42,
            gamma: 0.5,
            delta: 2.0,
            samples: 500,
            prompt_len: 5,
            corpus_seed: 7,
            attack: None,
            attack_rate: 0.1,
            attack_seed: 9,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(HarnessError::config(msg))
            }
        };
        c(self.vocab_size >= 2, "vocab_size must be at least 2")?;
        c(
            (0.0..=1.0).contains(&self.backward_weight),
            "backward_weight must be in [0, 1]",
        )?;
        c(self.n >= 1, "n must be at least 1")?;
        c(
            self.block_size >= 1 && (self.n % self.block_size == 0 || self.block_size >= self.n),
            "block_size must divide n (or equal n for no-block mode)",
        )?;
        c(
            self.temperature >= 0.0 && self.temperature.is_finite(),
            "temperature must be finite and non-negative",
        )?;
        c(
            self.gamma > 0.0 && self.gamma < 1.0,
            "gamma must lie strictly in (0, 1)",
        )?;
        c(
            self.delta >= 0.0 && self.delta.is_finite(),
            "delta must be finite and non-negative",
        )?;
        c(self.samples >= 1, "samples must be at least 1")?;
        c(
            (0.0..1.0).contains(&self.attack_rate),
            "attack_rate must lie in [0, 1)",
        )?;
        let blocks = self.n / self.block_size.min(self.n);
        c(
            (self.steps as usize) >= blocks,
            "steps must cover at least one step per block",
        )?;
        Ok(())
    }

    pub fn watermark_key(&self) -> Result<WatermarkKey, KeyError> {
        WatermarkKey::new(self.seed, self.gamma, self.delta)
    }

    pub fn attack_spec(&self) -> Option<AttackSpec> {
        self.attack.map(|kind| AttackSpec {
            kind,
            rate: self.attack_rate,
            rng_seed: self.attack_seed,
        })
    }

    /// Sampler for one sample, seeded independently per sample id.
    pub fn sampler_for(&self, sample_seed: u64) -> Sampler {
        Sampler::from_temperature(self.temperature, sample_seed)
    }

    /// Flat text form: one `name = value` line per field, attack line
    /// omitted when unset.
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("vocab_size", self.vocab_size.to_string());
        put("model_seed", self.model_seed.to_string());
        put("backward_weight", self.backward_weight.to_string());
        put("n", self.n.to_string());
        put("steps", self.steps.to_string());
        put("block_size", self.block_size.to_string());
        put("temperature", self.temperature.to_string());
        put("strategy", self.strategy.to_string());
        put("seed", self.seed.to_string());
        put("gamma", self.gamma.to_string());
        put("delta", self.delta.to_string());
        put("samples", self.samples.to_string());
        put("prompt_len", self.prompt_len.to_string());
        put("corpus_seed", self.corpus_seed.to_string());
        if let Some(kind) = self.attack {
            put("attack", kind.to_string());
        }
        put("attack_rate", self.attack_rate.to_string());
        put("attack_seed", self.attack_seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    /// Parse the flat form. Unset fields fall back to defaults; unknown or
    /// repeated fields are errors.
    pub fn from_flat_text(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::config(format!("line {}: expected `name = value`", lineno + 1))
            })?;
            let (name, value) = (name.trim(), value.trim());
            if !seen.insert(name.to_string()) {
                return Err(HarnessError::config(format!("duplicate field {name}")));
            }
            let bad = || HarnessError::config(format!("bad value for {name}: {value:?}"));
            match name {
                "vocab_size" => cfg.vocab_size = value.parse().map_err(|_| bad())?,
                "model_seed" => cfg.model_seed = value.parse().map_err(|_| bad())?,
                "backward_weight" => cfg.backward_weight = value.parse().map_err(|_| bad())?,
                "n" => cfg.n = value.parse().map_err(|_| bad())?,
                "steps" => cfg.steps = value.parse().map_err(|_| bad())?,
                "block_size" => cfg.block_size = value.parse().map_err(|_| bad())?,
                "temperature" => cfg.temperature = value.parse().map_err(|_| bad())?,
                "strategy" => cfg.strategy = value.parse().map_err(HarnessError::Config)?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "gamma" => cfg.gamma = value.parse().map_err(|_| bad())?,
                "delta" => cfg.delta = value.parse().map_err(|_| bad())?,
                "samples" => cfg.samples = value.parse().map_err(|_| bad())?,
                "prompt_len" => cfg.prompt_len = value.parse().map_err(|_| bad())?,
                "corpus_seed" => cfg.corpus_seed = value.parse().map_err(|_| bad())?,
                "attack" => cfg.attack = Some(value.parse().map_err(HarnessError::Config)?),
                "attack_rate" => cfg.attack_rate = value.parse().map_err(|_| bad())?,
                "attack_seed" => cfg.attack_seed = value.parse().map_err(|_| bad())?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => {
                    return Err(HarnessError::config(format!("unknown field {other}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_flat_text(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_flat_text())
            .map_err(|e| HarnessError::config(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_text_roundtrip_is_lossless() {
        let mut cfg = RunConfig {
            gamma: 0.3333333333333333,
            delta: 2.5,
            temperature: 0.7,
            attack: Some(AttackKind::Swap),
            ..RunConfig::default()
        };
        cfg.backward_weight = 0.123456789012345;
        let text = cfg.to_flat_text();
        let back = RunConfig::from_flat_text(&text).unwrap();
        assert_eq!(cfg, back);
        // And the rendering itself is stable.
        assert_eq!(text, back.to_flat_text());
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = RunConfig::from_flat_text("gamma = 0.25\nsamples = 10\n").unwrap();
        assert_eq!(cfg.gamma, 0.25);
        assert_eq!(cfg.samples, 10);
        assert_eq!(cfg.vocab_size, RunConfig::default().vocab_size);
        assert!(cfg.attack.is_none());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_flat_text("nonsense").is_err());
        assert!(RunConfig::from_flat_text("gamma = chicken\n").is_err());
        assert!(RunConfig::from_flat_text("unknown_field = 3\n").is_err());
        assert!(RunConfig::from_flat_text("gamma = 0.5\ngamma = 0.6\n").is_err());
        assert!(RunConfig::from_flat_text("gamma = 1.5\n").is_err());
        assert!(RunConfig::from_flat_text("n = 200\nblock_size = 33\n").is_err());
        assert!(RunConfig::from_flat_text("strategy = sideways\n").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::from_flat_text("# a comment\n\n  delta = 5\n").unwrap();
        assert_eq!(cfg.delta, 5.0);
    }
}
