//! Detection report records (JSONL), calibration files, and whole-run
//! records with recomputable aggregates.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{score, Calibration, DetectionReport, ThresholdEntry, TprRow};
use crate::harness::corpus::{Corpus, VARIANT_BASELINE};
use crate::harness::{HarnessError, RunConfig};
use crate::matrix::GreenLookup;
use crate::partition::WatermarkKey;

/// One scored sample, one JSON line:
/// `{id, n, green_count, z, strategy, gamma, delta, seed, attack, attack_param}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: u64,
    pub n: usize,
    pub green_count: usize,
    pub z: f64,
    pub strategy: String,
    pub gamma: f64,
    pub delta: f64,
    pub seed: u64,
    pub attack: Option<String>,
    pub attack_param: Option<f64>,
}

pub fn write_records(records: &[ReportRecord], path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path)
        .map_err(|e| HarnessError::data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| HarnessError::data(format!("serialize failed: {e}")))?;
        writeln!(w, "{line}").map_err(|e| HarnessError::data(format!("write failed: {e}")))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ReportRecord>, HarnessError> {
    let file = std::fs::File::open(path)
        .map_err(|e| HarnessError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| HarnessError::data(format!("read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::data(format!("bad report record: {e}")))?,
        );
    }
    Ok(out)
}

/// Score every sample of a corpus. The strategy label comes from the corpus
/// variant: baseline corpora report `"none"`.
pub fn detect_corpus(
    corpus: &Corpus,
    key: &WatermarkKey,
    lookup: &dyn GreenLookup,
) -> Result<Vec<(DetectionReport, ReportRecord)>, HarnessError> {
    let cfg = &corpus.header.config;
    let expected = cfg
        .watermark_key()
        .map_err(|e| HarnessError::config(e.to_string()))?;
    if expected.fingerprint() != key.fingerprint() {
        return Err(HarnessError::data(format!(
            "corpus was generated under key fingerprint {:#018x}, detector has {:#018x}",
            expected.fingerprint(),
            key.fingerprint()
        )));
    }
    let strategy_label = if corpus.header.variant == VARIANT_BASELINE {
        "none".to_string()
    } else {
        cfg.strategy.to_string()
    };
    let (attack, attack_param) = match &corpus.header.attack {
        Some(spec) => (Some(spec.kind.to_string()), Some(spec.rate)),
        None => (None, None),
    };
    let mut out = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        let report = score(key, lookup, &s.tokens, s.prompt.last().copied())
            .map_err(|e| HarnessError::data(format!("sample {}: {e}", s.id)))?;
        let record = ReportRecord {
            id: s.id,
            n: report.n,
            green_count: report.green_count,
            z: report.z,
            strategy: strategy_label.clone(),
            gamma: cfg.gamma,
            delta: cfg.delta,
            seed: cfg.seed,
            attack: attack.clone(),
            attack_param,
        };
        out.push((report, record));
    }
    Ok(out)
}

/// Calibration summary written next to threshold tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub kind: String,
    pub gamma: f64,
    pub seed: u64,
    pub n_null: usize,
    pub thresholds: Vec<ThresholdEntry>,
    pub warnings: Vec<String>,
    pub null_mean_z: f64,
    pub null_std_z: f64,
}

impl CalibrationFile {
    pub fn from_calibration(cal: &Calibration, gamma: f64, seed: u64) -> Self {
        let n = cal.null_scores.len();
        let mean = cal.null_scores.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (cal.null_scores.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        CalibrationFile {
            kind: "calibration".into(),
            gamma,
            seed,
            n_null: n,
            thresholds: cal.thresholds.clone(),
            warnings: cal.warnings.clone(),
            null_mean_z: mean,
            null_std_z: std,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::data(format!("serialize failed: {e}")))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| HarnessError::data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::data(format!("cannot open {}: {e}", path.display())))?;
        let file: CalibrationFile = serde_json::from_str(&text)
            .map_err(|e| HarnessError::data(format!("bad calibration file: {e}")))?;
        if file.kind != "calibration" {
            return Err(HarnessError::data(format!(
                "{} is not a calibration file",
                path.display()
            )));
        }
        Ok(file)
    }

    pub fn threshold_for(&self, fpr: f64) -> Result<f64, HarnessError> {
        self.thresholds
            .iter()
            .find(|t| t.fpr == fpr)
            .map(|t| t.z)
            .ok_or_else(|| HarnessError::data(format!("no threshold calibrated for fpr {fpr}")))
    }
}

/// Aligned-column rendering of a calibration summary.
pub fn render_calibration(file: &CalibrationFile) -> String {
    let mut s = format!(
        "calibration: {} null scores, gamma {}, mean z {:+.4}, std {:.4}\n",
        file.n_null, file.gamma, file.null_mean_z, file.null_std_z
    );
    s.push_str(&format!("{:>8}  {:>10}\n", "FPR", "threshold"));
    for t in &file.thresholds {
        s.push_str(&format!("{:>7.2}%  {:>10.4}\n", t.fpr * 100.0, t.z));
    }
    for w in &file.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregates {
    pub mean_z: f64,
    pub tpr: Vec<TprRow>,
    pub mean_nll: Option<f64>,
}

/// A complete run: config snapshot, per-sample records, aggregates, and
/// timing. Aggregates are recomputed and checked on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub reports: Vec<ReportRecord>,
    pub aggregates: RunAggregates,
    pub wall_ms: u64,
    pub tokens_per_second: f64,
}

impl RunRecord {
    pub fn new(
        config: RunConfig,
        reports: Vec<ReportRecord>,
        tpr: Vec<TprRow>,
        mean_nll: Option<f64>,
        wall_ms: u64,
    ) -> Self {
        let mean_z = mean_z_of(&reports);
        let total_tokens: usize = reports.iter().map(|r| r.n).sum();
        let tokens_per_second = if wall_ms == 0 {
            0.0
        } else {
            total_tokens as f64 / (wall_ms as f64 / 1000.0)
        };
        RunRecord {
            config,
            reports,
            aggregates: RunAggregates {
                mean_z,
                tpr,
                mean_nll,
            },
            wall_ms,
            tokens_per_second,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::data(format!("serialize failed: {e}")))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| HarnessError::data(format!("cannot write {}: {e}", path.display())))
    }

    /// Load and verify that the stored aggregates match the per-sample
    /// records they claim to summarize.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::data(format!("cannot open {}: {e}", path.display())))?;
        let record: RunRecord = serde_json::from_str(&text)
            .map_err(|e| HarnessError::data(format!("bad run record: {e}")))?;
        let mean_z = mean_z_of(&record.reports);
        if (mean_z - record.aggregates.mean_z).abs() > 1e-9 {
            return Err(HarnessError::data(format!(
                "aggregate mean z {} does not match records ({mean_z})",
                record.aggregates.mean_z
            )));
        }
        for row in &record.aggregates.tpr {
            let zs: Vec<f64> = record.reports.iter().map(|r| r.z).collect();
            let tpr = crate::detect::fraction_above(&zs, row.threshold);
            if (tpr - row.tpr).abs() > 1e-9 {
                return Err(HarnessError::data(format!(
                    "aggregate TPR at fpr {} does not match records",
                    row.fpr
                )));
            }
        }
        Ok(record)
    }
}

pub fn mean_z_of(reports: &[ReportRecord]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.z).sum::<f64>() / reports.len() as f64
}
