//! Forward z-score detection with empirically calibrated thresholds.
//!
//! Detection sees only the final token sequence: position `i` counts as
//! green when `tokens[i]` is forward-green given `tokens[i-1]` (or the
//! prompt tail for position 0 when one is supplied). The verdict never
//! consults generation order or the strategy that embedded the mark.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{GreenLookup, MatrixError};
use crate::partition::{TokenId, WatermarkKey};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("need at least 2 tokens (or 1 with a prompt context), got {len}")]
    InputTooShort { len: usize },
    #[error("key fingerprint {key:#018x} does not match matrix fingerprint {matrix:#018x}")]
    KeyMatrixMismatch { key: u64, matrix: u64 },
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: u32 },
    #[error("no null scores to calibrate on")]
    EmptyCalibration,
    #[error("no false-positive rates given")]
    EmptyFprs,
    #[error("false-positive rate {0} outside (0, 1)")]
    BadFpr(f64),
    #[error("no threshold calibrated for fpr {0}")]
    UnknownFpr(f64),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Outcome of scoring one token sequence.
#[derive(Debug, Clone, Serialize)]
pub struct DetectionReport {
    /// Number of scored positions (excludes position 0 when no prompt tail
    /// was supplied).
    pub n: usize,
    pub green_count: usize,
    pub z: f64,
    /// Set by [`DetectionReport::with_threshold`]; scoring alone leaves it
    /// empty.
    pub threshold: Option<f64>,
    pub is_watermarked: Option<bool>,
    /// One flag per input token; unscored position 0 stays false.
    pub green_flags: Vec<bool>,
    /// Green count under the backward reading of the same pairs. Diagnostic
    /// only, never part of the verdict.
    pub backward_green_count: usize,
}

impl DetectionReport {
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self.is_watermarked = Some(self.z > threshold);
        self
    }
}

/// z-score of a green count: `(count - gamma*n) / sqrt(gamma*(1-gamma)*n)`.
pub fn z_score(green_count: usize, n: usize, gamma: f64) -> f64 {
    (green_count as f64 - gamma * n as f64) / (gamma * (1.0 - gamma) * n as f64).sqrt()
}

/// Score a token sequence against a key and its green-list structure.
pub fn score(
    key: &WatermarkKey,
    matrix: &dyn GreenLookup,
    tokens: &[TokenId],
    prompt_tail: Option<TokenId>,
) -> Result<DetectionReport, DetectError> {
    if key.fingerprint() != matrix.key_fingerprint() {
        return Err(DetectError::KeyMatrixMismatch {
            key: key.fingerprint(),
            matrix: matrix.key_fingerprint(),
        });
    }
    let vocab = matrix.vocab_size();
    for t in tokens.iter().chain(prompt_tail.iter()) {
        if t.0 >= vocab {
            return Err(DetectError::TokenOutOfRange {
                token: t.0,
                vocab_size: vocab,
            });
        }
    }
    let scored = match prompt_tail {
        Some(_) => tokens.len(),
        None => tokens.len().saturating_sub(1),
    };
    if scored == 0 {
        return Err(DetectError::InputTooShort { len: tokens.len() });
    }

    let mut green_flags = vec![false; tokens.len()];
    let mut green_count = 0usize;
    for (i, &tok) in tokens.iter().enumerate() {
        let context = if i == 0 {
            match prompt_tail {
                Some(p) => p,
                None => continue,
            }
        } else {
            tokens[i - 1]
        };
        if matrix.is_green(context, tok) {
            green_flags[i] = true;
            green_count += 1;
        }
    }
    // Backward diagnostic: by row/column duality this counts the same pair
    // events read from the successor side (prompt boundary excluded).
    let backward_green_count = tokens
        .windows(2)
        .filter(|w| matrix.is_green(w[0], w[1]))
        .count();

    Ok(DetectionReport {
        n: scored,
        green_count,
        z: z_score(green_count, scored, key.gamma()),
        threshold: None,
        is_watermarked: None,
        green_flags,
        backward_green_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub fpr: f64,
    pub z: f64,
}

/// Null z-scores plus the calibrated per-FPR thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    /// Sorted ascending.
    pub null_scores: Vec<f64>,
    /// Sorted by FPR ascending; thresholds are non-increasing in FPR.
    pub thresholds: Vec<ThresholdEntry>,
    pub warnings: Vec<String>,
}

impl Calibration {
    pub fn threshold_for(&self, fpr: f64) -> Result<f64, DetectError> {
        self.thresholds
            .iter()
            .find(|t| t.fpr == fpr)
            .map(|t| t.z)
            .ok_or(DetectError::UnknownFpr(fpr))
    }
}

/// Threshold for FPR `f` over `n` null scores: the `ceil((1-f)*n)`-th order
/// statistic (1-indexed), a conservative upper quantile.
fn quantile_rank(n: usize, fpr: f64) -> usize {
    let rank = ((1.0 - fpr) * n as f64).ceil() as usize;
    rank.clamp(1, n)
}

pub fn calibrate(
    null_reports: &[DetectionReport],
    fprs: &[f64],
) -> Result<Calibration, DetectError> {
    calibrate_scores(&null_reports.iter().map(|r| r.z).collect::<Vec<_>>(), fprs)
}

pub fn calibrate_scores(null_z: &[f64], fprs: &[f64]) -> Result<Calibration, DetectError> {
    if null_z.is_empty() {
        return Err(DetectError::EmptyCalibration);
    }
    if fprs.is_empty() {
        return Err(DetectError::EmptyFprs);
    }
    let mut sorted = null_z.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut fprs_sorted = fprs.to_vec();
    fprs_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut thresholds = Vec::with_capacity(fprs_sorted.len());
    let mut warnings = Vec::new();
    for &fpr in &fprs_sorted {
        if !(fpr > 0.0 && fpr < 1.0) {
            return Err(DetectError::BadFpr(fpr));
        }
        if (n as f64) * fpr < 1.0 {
            warnings.push(format!(
                "fpr {fpr}: quantile unstable with {n} null scores (need at least {})",
                (1.0 / fpr).ceil() as usize
            ));
        }
        thresholds.push(ThresholdEntry {
            fpr,
            z: sorted[quantile_rank(n, fpr) - 1],
        });
    }
    Ok(Calibration {
        null_scores: sorted,
        thresholds,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprRow {
    pub fpr: f64,
    pub threshold: f64,
    pub tpr: f64,
}

/// True-positive rates of a watermarked batch at each calibrated threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TprTable {
    pub rows: Vec<TprRow>,
}

impl TprTable {
    pub fn tpr_at(&self, fpr: f64) -> Result<f64, DetectError> {
        self.rows
            .iter()
            .find(|r| r.fpr == fpr)
            .map(|r| r.tpr)
            .ok_or(DetectError::UnknownFpr(fpr))
    }
}

impl std::fmt::Display for TprTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:>8}  {:>10}  {:>8}", "FPR", "threshold", "TPR")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>7.2}%  {:>10.4}  {:>7.2}%",
                r.fpr * 100.0,
                r.threshold,
                r.tpr * 100.0
            )?;
        }
        Ok(())
    }
}

pub fn evaluate(watermarked: &[DetectionReport], cal: &Calibration) -> TprTable {
    evaluate_scores(&watermarked.iter().map(|r| r.z).collect::<Vec<_>>(), cal)
}

pub fn evaluate_scores(z_scores: &[f64], cal: &Calibration) -> TprTable {
    let rows = cal
        .thresholds
        .iter()
        .map(|t| TprRow {
            fpr: t.fpr,
            threshold: t.z,
            tpr: fraction_above(z_scores, t.z),
        })
        .collect();
    TprTable { rows }
}

/// Fraction of scores strictly above the threshold (the detection rule).
pub fn fraction_above(z_scores: &[f64], threshold: f64) -> f64 {
    if z_scores.is_empty() {
        return 0.0;
    }
    z_scores.iter().filter(|&&z| z > threshold).count() as f64 / z_scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::GreenMatrix;
    use crate::partition::KeyedPartition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Frozen independently: 29 / sqrt(50).
    const Z_129_OF_200: f64 = 4.1012193308819755;

    fn setup(vocab: u32) -> (WatermarkKey, GreenMatrix) {
        let key = WatermarkKey::new(42, 0.5, 2.0).unwrap();
        let partition = KeyedPartition::new(key, vocab).unwrap();
        (key, GreenMatrix::build(&partition).unwrap())
    }

    #[test]
    fn z_arithmetic_exact() {
        assert_eq!(z_score(100, 200, 0.5), 0.0);
        assert!((z_score(129, 200, 0.5) - Z_129_OF_200).abs() < 1e-9);
    }

    #[test]
    fn score_counts_green_pairs() {
        let (key, matrix) = setup(64);
        let partition = KeyedPartition::new(key, 64).unwrap();
        let tokens: Vec<TokenId> = [5u32, 9, 14, 3, 60].iter().map(|&t| TokenId(t)).collect();

        // Without prompt context, position 0 is excluded.
        let report = score(&key, &matrix, &tokens, None).unwrap();
        assert_eq!(report.n, 4);
        let expect: usize = (1..tokens.len())
            .filter(|&i| partition.is_green(tokens[i - 1], tokens[i]))
            .count();
        assert_eq!(report.green_count, expect);
        assert!(!report.green_flags[0]);
        assert_eq!(
            report.green_flags.iter().filter(|&&b| b).count(),
            report.green_count
        );
        assert!(report.threshold.is_none() && report.is_watermarked.is_none());

        // With a prompt tail, position 0 is scored too.
        let report = score(&key, &matrix, &tokens, Some(TokenId(2))).unwrap();
        assert_eq!(report.n, 5);
        let expect0 = expect + usize::from(partition.is_green(TokenId(2), tokens[0]));
        assert_eq!(report.green_count, expect0);

        // Backward diagnostic equals the column-route count.
        let backward: usize = (0..tokens.len() - 1)
            .filter(|&i| {
                matrix
                    .backward_green(tokens[i + 1])
                    .unwrap()
                    .get(tokens[i].index())
            })
            .count();
        assert_eq!(report.backward_green_count, backward);
    }

    #[test]
    fn score_input_validation() {
        let (key, matrix) = setup(64);
        assert!(matches!(
            score(&key, &matrix, &[], None),
            Err(DetectError::InputTooShort { len: 0 })
        ));
        assert!(matches!(
            score(&key, &matrix, &[TokenId(1)], None),
            Err(DetectError::InputTooShort { len: 1 })
        ));
        // One token is fine when the prompt supplies its context.
        assert!(score(&key, &matrix, &[TokenId(1)], Some(TokenId(0))).is_ok());
        assert!(matches!(
            score(&key, &matrix, &[TokenId(1), TokenId(64)], None),
            Err(DetectError::TokenOutOfRange { token: 64, .. })
        ));
        let other = WatermarkKey::new(43, 0.5, 2.0).unwrap();
        assert!(matches!(
            score(&other, &matrix, &[TokenId(1), TokenId(2)], None),
            Err(DetectError::KeyMatrixMismatch { .. })
        ));
    }

    #[test]
    fn null_distribution_is_standard_normal() {
        // Uniform random token sequences: z should be ~N(0,1).
        let (key, matrix) = setup(4096);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 500;
        let mut zs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let tokens: Vec<TokenId> = (0..201).map(|_| TokenId(rng.random_range(0..4096))).collect();
            zs.push(score(&key, &matrix, &tokens, None).unwrap().z);
        }
        let mean = zs.iter().sum::<f64>() / trials as f64;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let std = var.sqrt();
        assert!(mean.abs() < 0.15, "mean {mean}");
        assert!((0.85..=1.15).contains(&std), "std {std}");
    }

    #[test]
    fn calibration_order_statistics() {
        // 500 crafted scores 0.01, 0.02, ..., 5.00.
        let scores: Vec<f64> = (1..=500).map(|i| i as f64 * 0.01).collect();
        let cal = calibrate_scores(&scores, &[0.01, 0.5]).unwrap();
        // ceil(0.99 * 500) = 495 -> value 4.95.
        assert_eq!(cal.threshold_for(0.01).unwrap(), 4.95);
        // f = 0.5 -> the median (250th order statistic).
        assert_eq!(cal.threshold_for(0.5).unwrap(), 2.50);
        assert!(cal.warnings.is_empty());

        // Achieved FPR on the calibration set never exceeds the nominal.
        for t in &cal.thresholds {
            assert!(fraction_above(&scores, t.z) <= t.fpr + 1e-12);
        }
    }

    #[test]
    fn calibration_monotone_and_warning() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let cal = calibrate_scores(&scores, &[0.05, 0.005, 0.01]).unwrap();
        for pair in cal.thresholds.windows(2) {
            assert!(pair[0].fpr < pair[1].fpr);
            assert!(pair[0].z >= pair[1].z, "thresholds must not increase");
        }
        // 100 nulls cannot resolve fpr 0.005.
        assert_eq!(cal.warnings.len(), 1);
        assert!(cal.warnings[0].contains("0.005"));

        assert!(matches!(
            calibrate_scores(&[], &[0.05]),
            Err(DetectError::EmptyCalibration)
        ));
        assert!(matches!(
            calibrate_scores(&scores, &[]),
            Err(DetectError::EmptyFprs)
        ));
        assert!(matches!(
            calibrate_scores(&scores, &[1.5]),
            Err(DetectError::BadFpr(_))
        ));
    }

    #[test]
    fn evaluate_boundary_cases() {
        let null: Vec<f64> = (0..400).map(|i| (i as f64 - 200.0) / 100.0).collect();
        let cal = calibrate_scores(&null, &[0.005, 0.01, 0.05]).unwrap();

        // Saturated scores: TPR 100% everywhere.
        let all_high = vec![50.0; 100];
        let table = evaluate_scores(&all_high, &cal);
        for r in &table.rows {
            assert_eq!(r.tpr, 1.0);
        }

        // The null corpus against itself: TPR tracks the nominal FPR.
        let table = evaluate_scores(&null, &cal);
        for r in &table.rows {
            assert!(r.tpr <= r.fpr + 1e-12);
            assert!(r.tpr >= r.fpr - 1.5 / null.len() as f64, "fpr {}", r.fpr);
        }
    }
}
