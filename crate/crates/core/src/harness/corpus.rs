//! Corpus generation and the self-describing JSONL corpus format: a header
//! line carrying the config, then one record per sample.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::harness::{HarnessError, RunConfig};
use crate::matrix::{GreenLookup, GreenMatrix, MatrixError, VirtualGreenMatrix};
use crate::partition::{mix64, KeyedPartition, TokenId};
use crate::strategy::StrategyBias;
use crate::toy::{decode_traced, DecodeTrace, ToyLm};

pub const VARIANT_WATERMARKED: &str = "watermarked";
pub const VARIANT_BASELINE: &str = "baseline";
pub const VARIANT_ATTACKED: &str = "attacked";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub kind: String,
    pub variant: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    /// Samples where the attack fell below one edit and passed through.
    #[serde(default)]
    pub degenerate_edits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub id: u64,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn write_jsonl(&self, path: &Path) -> Result<(), HarnessError> {
        let file = std::fs::File::create(path)
            .map_err(|e| HarnessError::data(format!("cannot create {}: {e}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| HarnessError::data(format!("write failed: {e}"));
        let ser_err = |e: serde_json::Error| HarnessError::data(format!("serialize failed: {e}"));
        let header = serde_json::to_string(&self.header).map_err(ser_err)?;
        writeln!(w, "{header}").map_err(io_err)?;
        for s in &self.samples {
            let line = serde_json::to_string(s).map_err(ser_err)?;
            writeln!(w, "{line}").map_err(io_err)?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, HarnessError> {
        let file = std::fs::File::open(path)
            .map_err(|e| HarnessError::data(format!("cannot open {}: {e}", path.display())))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| HarnessError::data(format!("{}: empty corpus", path.display())))?
            .map_err(|e| HarnessError::data(format!("read failed: {e}")))?;
        let header: CorpusHeader = serde_json::from_str(&header_line)
            .map_err(|e| HarnessError::data(format!("bad corpus header: {e}")))?;
        if header.kind != "corpus" {
            return Err(HarnessError::data(format!(
                "{} is not a corpus file (kind {:?})",
                path.display(),
                header.kind
            )));
        }
        let mut samples = Vec::new();
        for line in lines {
            let line = line.map_err(|e| HarnessError::data(format!("read failed: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(
                serde_json::from_str(&line)
                    .map_err(|e| HarnessError::data(format!("bad corpus record: {e}")))?,
            );
        }
        Ok(Corpus { header, samples })
    }
}

/// Generation-order statistics measured on the watermarked decodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenStats {
    /// Fraction of positions whose left context existed at finalization.
    pub context_available_frac: f64,
    /// Fraction of positions finalized before their left neighbor.
    pub out_of_order_frac: f64,
    /// Highest repetition count of any single bigram, one entry per sample.
    /// Recorded for repetition screening; no filter is applied.
    pub max_repeated_bigram: Vec<u32>,
}

/// Forward-sample a prompt from the model at temperature 1: first token from
/// the unigram softmax, the rest from the left-conditional rows.
pub fn sample_prompt(model: &ToyLm, seed: u64, len: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = model.vocab_size() as usize;
    let mut out = Vec::with_capacity(len);
    let mut weights = vec![0.0f64; v];
    for i in 0..len {
        let left = out.last().copied();
        let mut max = f32::NEG_INFINITY;
        for t in 0..v {
            let logit = match left {
                Some(u) => model.unigram()[t] + model.bigram_row(u)[t],
                None => model.unigram()[t],
            };
            weights[t] = logit as f64;
            max = max.max(logit);
        }
        let mut total = 0.0f64;
        for w in weights.iter_mut() {
            *w = (*w - max as f64).exp();
            total += *w;
        }
        let target: f64 = rng.random_range(0.0..1.0) * total;
        let mut acc = 0.0;
        let mut chosen = v - 1;
        for (t, w) in weights.iter().enumerate() {
            acc += w;
            if acc > target {
                chosen = t;
                break;
            }
        }
        out.push(TokenId(chosen as u32));
        debug_assert!(i < len);
    }
    out
}

pub fn max_repeated_bigram(tokens: &[TokenId]) -> u32 {
    let mut counts = std::collections::HashMap::new();
    for w in tokens.windows(2) {
        *counts.entry((w[0].0, w[1].0)).or_insert(0u32) += 1;
    }
    counts.values().copied().max().unwrap_or(0)
}

/// Pick the dense matrix when the square fits the budget, otherwise the
/// on-demand view with identical behavior.
pub fn green_lookup_for(partition: &KeyedPartition) -> Result<Box<dyn GreenLookup>, HarnessError> {
    match GreenMatrix::build(partition) {
        Ok(m) => Ok(Box::new(m)),
        Err(MatrixError::BudgetExceeded { .. }) => {
            Ok(Box::new(VirtualGreenMatrix::new(partition.clone())))
        }
        Err(e) => Err(HarnessError::data(e.to_string())),
    }
}

/// Generate the paired corpora: watermarked and baseline decodes share
/// prompts, sampler seeds, and the model, so `delta = 0` makes them
/// byte-identical. Parallel across samples with per-sample seeding; output
/// order is by sample id regardless of scheduling.
pub fn generate_pair(cfg: &RunConfig) -> Result<(Corpus, Corpus, GenStats), HarnessError> {
    cfg.validate()?;
    let model = ToyLm::random(
        cfg.vocab_size,
        cfg.model_seed,
        cfg.backward_weight as f32,
    );
    let key = cfg
        .watermark_key()
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let partition = KeyedPartition::new(key, cfg.vocab_size)
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let lookup = green_lookup_for(&partition)?;
    let biaser = StrategyBias::new(cfg.strategy, key, lookup.as_ref())
        .map_err(|e| HarnessError::config(e.to_string()))?;

    let decoded: Result<Vec<(Vec<TokenId>, DecodeTrace, DecodeTrace)>, HarnessError> = (0..cfg
        .samples as u64)
        .into_par_iter()
        .map(|id| {
            let prompt = sample_prompt(&model, mix64(cfg.corpus_seed, 2 * id), cfg.prompt_len);
            let sampler = cfg.sampler_for(mix64(cfg.corpus_seed, 2 * id + 1));
            let wm = decode_traced(
                &model,
                &prompt,
                cfg.n,
                cfg.steps,
                cfg.block_size,
                sampler,
                Some(&biaser),
            )
            .map_err(|e| HarnessError::config(e.to_string()))?;
            let base = decode_traced(
                &model,
                &prompt,
                cfg.n,
                cfg.steps,
                cfg.block_size,
                sampler,
                None,
            )
            .map_err(|e| HarnessError::config(e.to_string()))?;
            Ok((prompt, wm, base))
        })
        .collect();
    let decoded = decoded?;

    let mut wm_samples = Vec::with_capacity(cfg.samples);
    let mut base_samples = Vec::with_capacity(cfg.samples);
    let mut ctx_avail = 0.0;
    let mut out_of_order = 0.0;
    let mut max_rep = Vec::with_capacity(cfg.samples);
    for (id, (prompt, wm, base)) in decoded.into_iter().enumerate() {
        ctx_avail += wm.context_available_frac();
        out_of_order += wm.out_of_order_frac();
        max_rep.push(max_repeated_bigram(&wm.tokens));
        wm_samples.push(CorpusSample {
            id: id as u64,
            prompt: prompt.clone(),
            tokens: wm.tokens,
        });
        base_samples.push(CorpusSample {
            id: id as u64,
            prompt,
            tokens: base.tokens,
        });
    }
    let stats = GenStats {
        context_available_frac: ctx_avail / cfg.samples as f64,
        out_of_order_frac: out_of_order / cfg.samples as f64,
        max_repeated_bigram: max_rep,
    };
    let header = |variant: &str| CorpusHeader {
        kind: "corpus".into(),
        variant: variant.into(),
        config: cfg.clone(),
        attack: None,
        degenerate_edits: 0,
    };
    Ok((
        Corpus {
            header: header(VARIANT_WATERMARKED),
            samples: wm_samples,
        },
        Corpus {
            header: header(VARIANT_BASELINE),
            samples: base_samples,
        },
        stats,
    ))
}

/// Apply an attack to every sample of a corpus, producing the attacked
/// corpus with its provenance recorded in the header.
pub fn attack_corpus(corpus: &Corpus, spec: &AttackSpec) -> Result<Corpus, HarnessError> {
    let vocab = corpus.header.config.vocab_size;
    let mut samples = Vec::with_capacity(corpus.samples.len());
    let mut degenerate = 0u64;
    for s in &corpus.samples {
        // Per-sample seed keeps the attack independent of corpus order.
        let per_sample = AttackSpec {
            rng_seed: mix64(spec.rng_seed, s.id),
            ..*spec
        };
        let out = crate::attack::apply(&per_sample, &s.tokens, vocab)
            .map_err(|e| HarnessError::data(format!("sample {}: {e}", s.id)))?;
        if out.no_edit {
            degenerate += 1;
        }
        samples.push(CorpusSample {
            id: s.id,
            prompt: s.prompt.clone(),
            tokens: out.tokens,
        });
    }
    Ok(Corpus {
        header: CorpusHeader {
            kind: "corpus".into(),
            variant: VARIANT_ATTACKED.into(),
            config: corpus.header.config.clone(),
            attack: Some(*spec),
            degenerate_edits: degenerate,
        },
        samples,
    })
}
