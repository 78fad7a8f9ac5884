//! Parameter sweeps over (strategy, gamma, delta, n): per cell, generate the
//! paired corpora, calibrate on the cell's own baseline, and report TPRs,
//! mean z, and the NLL quality proxy.

use serde::{Deserialize, Serialize};

use crate::detect::{calibrate, evaluate, TprRow};
use crate::harness::corpus::generate_pair;
use crate::harness::quality::QualityScorer;
use crate::harness::records::detect_corpus;
use crate::harness::{HarnessError, RunConfig};
use crate::matrix::GreenMatrix;
use crate::partition::KeyedPartition;
use crate::strategy::StrategyKind;
use crate::toy::ToyLm;

/// Cross-product sweep axes. Empty axes inherit the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub strategies: Vec<StrategyKind>,
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub ns: Vec<usize>,
}

impl SweepGrid {
    /// The parameter-sensitivity grid: gamma in {0.25, 0.5, 0.75} crossed
    /// with delta in {1, 2, 5, 10}, strategy and length from the base.
    pub fn parameter_table() -> Self {
        SweepGrid {
            strategies: vec![],
            gammas: vec![0.25, 0.5, 0.75],
            deltas: vec![1.0, 2.0, 5.0, 10.0],
            ns: vec![],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub gamma: f64,
    pub delta: f64,
    pub n: usize,
    pub samples: usize,
    pub mean_z: f64,
    pub mean_nll: f64,
    pub tpr: Vec<TprRow>,
}

/// Run the full cross product in a fixed order. Each cell is seeded from the
/// base config alone, so sequential and parallel runs agree.
pub fn run_sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    fprs: &[f64],
) -> Result<Vec<SweepRow>, HarnessError> {
    base.validate()?;
    let strategies = if grid.strategies.is_empty() {
        vec![base.strategy]
    } else {
        grid.strategies.clone()
    };
    let gammas = if grid.gammas.is_empty() {
        vec![base.gamma]
    } else {
        grid.gammas.clone()
    };
    let deltas = if grid.deltas.is_empty() {
        vec![base.delta]
    } else {
        grid.deltas.clone()
    };
    let ns = if grid.ns.is_empty() {
        vec![base.n]
    } else {
        grid.ns.clone()
    };

    let model = ToyLm::random(base.vocab_size, base.model_seed, base.backward_weight as f32);
    let scorer = QualityScorer::new(&model);

    let mut rows = Vec::new();
    for &strategy in &strategies {
        for &gamma in &gammas {
            for &delta in &deltas {
                for &n in &ns {
                    // Hold the schedule density fixed across lengths so
                    // per-token dynamics are comparable: steps scale with n.
                    let steps = ((base.steps as usize * n) / base.n).max(1) as u32;
                    let cfg = RunConfig {
                        strategy,
                        gamma,
                        delta,
                        n,
                        steps,
                        block_size: if n % base.block_size == 0 {
                            base.block_size
                        } else {
                            n
                        },
                        ..base.clone()
                    };
                    cfg.validate()?;
                    let (wm, null, _) = generate_pair(&cfg)?;
                    let key = cfg
                        .watermark_key()
                        .map_err(|e| HarnessError::config(e.to_string()))?;
                    let partition = KeyedPartition::new(key, cfg.vocab_size)
                        .map_err(|e| HarnessError::config(e.to_string()))?;
                    let matrix = GreenMatrix::build(&partition)
                        .map_err(|e| HarnessError::data(e.to_string()))?;
                    let wm_scored = detect_corpus(&wm, &key, &matrix)?;
                    let null_scored = detect_corpus(&null, &key, &matrix)?;
                    let null_reports: Vec<_> =
                        null_scored.iter().map(|(r, _)| r.clone()).collect();
                    let wm_reports: Vec<_> = wm_scored.iter().map(|(r, _)| r.clone()).collect();
                    let cal = calibrate(&null_reports, fprs)
                        .map_err(|e| HarnessError::data(e.to_string()))?;
                    let table = evaluate(&wm_reports, &cal);
                    let mean_z = wm_reports.iter().map(|r| r.z).sum::<f64>()
                        / wm_reports.len() as f64;
                    let texts: Vec<_> = wm.samples.iter().map(|s| s.tokens.clone()).collect();
                    rows.push(SweepRow {
                        strategy: strategy.to_string(),
                        gamma,
                        delta,
                        n,
                        samples: cfg.samples,
                        mean_z,
                        mean_nll: scorer.mean_nll(&texts),
                        tpr: table.rows,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Aligned-column rendering, one row per cell.
pub fn render_sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>10}  {:>5}  {:>5}  {:>4}  {:>7}  {:>7}",
        "strategy", "gamma", "delta", "n", "mean_z", "nll"
    );
    if let Some(first) = rows.first() {
        for t in &first.tpr {
            s.push_str(&format!("  TPR@{:>4.1}%", t.fpr * 100.0));
        }
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{:>10}  {:>5}  {:>5}  {:>4}  {:>7.3}  {:>7.3}",
            r.strategy, r.gamma, r.delta, r.n, r.mean_z, r.mean_nll
        ));
        for t in &r.tpr {
            s.push_str(&format!("  {:>8.1}%", t.tpr * 100.0));
        }
        s.push('\n');
    }
    s
}

pub fn write_sweep_jsonl(rows: &[SweepRow], path: &std::path::Path) -> Result<(), HarnessError> {
    use std::io::Write;
    let file = std::fs::File::create(path)
        .map_err(|e| HarnessError::data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        let line = serde_json::to_string(r)
            .map_err(|e| HarnessError::data(format!("serialize failed: {e}")))?;
        writeln!(w, "{line}").map_err(|e| HarnessError::data(format!("write failed: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sweep_has_full_cross_product() {
        let base = RunConfig {
            vocab_size: 64,
            n: 16,
            steps: 8,
            block_size: 8,
            samples: 4,
            prompt_len: 2,
            ..RunConfig::default()
        };
        let grid = SweepGrid {
            strategies: vec![StrategyKind::Direct, StrategyKind::PredictiveBidirectional],
            gammas: vec![0.5],
            deltas: vec![0.5, 2.0],
            ns: vec![],
        };
        let rows = run_sweep(&base, &grid, &[0.05]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].strategy, "direct");
        assert_eq!(rows[0].n, 16);
        let rendered = render_sweep_table(&rows);
        assert!(rendered.contains("TPR@ 5.0%"));
        assert_eq!(rendered.lines().count(), 5);
    }

    #[test]
    fn sweep_is_deterministic() {
        let base = RunConfig {
            vocab_size: 64,
            n: 16,
            steps: 8,
            block_size: 8,
            samples: 3,
            prompt_len: 2,
            ..RunConfig::default()
        };
        let grid = SweepGrid {
            strategies: vec![],
            gammas: vec![0.25, 0.5],
            deltas: vec![2.0],
            ns: vec![],
        };
        let a = run_sweep(&base, &grid, &[0.05]).unwrap();
        let b = run_sweep(&base, &grid, &[0.05]).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
