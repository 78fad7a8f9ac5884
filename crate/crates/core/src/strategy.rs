//! The four watermark bias strategies, applied to one position's logit row
//! given what is known about its neighbors.
//!
//! Direct biases only when the left token exists. Predictive falls back to
//! the model's argmax guess for a missing left token. Bidirectional adds a
//! forward term for an existing left token and a backward term for an
//! existing right token. Predictive-bidirectional applies both terms at
//! every position, predicting whichever neighbor is missing; at the sequence
//! end the backward constraint vanishes, which shows up as a uniform shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitset::Bitset;
use crate::matrix::{GreenLookup, MatrixError};
use crate::partition::{TokenId, WatermarkKey};
use crate::toy::decode::{argmax_lowest, DenoiseState, RowSource};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("key fingerprint {key:#018x} does not match matrix fingerprint {matrix:#018x}")]
    FingerprintMismatch { key: u64, matrix: u64 },
    #[error("missing required {side} prediction at position {pos}")]
    MissingPrediction { side: &'static str, pos: usize },
    #[error("no logit row available for position {pos}")]
    RowUnavailable { pos: usize },
    #[error("position {pos} out of range for sequence of {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("logit row has {got} entries, vocabulary needs {expected}")]
    RowLengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "predictive")]
    Predictive,
    #[serde(rename = "bidir")]
    Bidirectional,
    #[serde(rename = "pred-bidir")]
    PredictiveBidirectional,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Direct,
        StrategyKind::Predictive,
        StrategyKind::Bidirectional,
        StrategyKind::PredictiveBidirectional,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Direct => "direct",
            StrategyKind::Predictive => "predictive",
            StrategyKind::Bidirectional => "bidir",
            StrategyKind::PredictiveBidirectional => "pred-bidir",
        }
    }

    /// Does this strategy substitute predictions for missing left / right
    /// neighbors?
    fn predicts_left(&self) -> bool {
        matches!(
            self,
            StrategyKind::Predictive | StrategyKind::PredictiveBidirectional
        )
    }

    fn predicts_right(&self) -> bool {
        matches!(self, StrategyKind::PredictiveBidirectional)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(StrategyKind::Direct),
            "predictive" => Ok(StrategyKind::Predictive),
            "bidir" => Ok(StrategyKind::Bidirectional),
            "pred-bidir" => Ok(StrategyKind::PredictiveBidirectional),
            other => Err(format!(
                "unknown strategy {other:?} (expected direct, predictive, bidir, or pred-bidir)"
            )),
        }
    }
}

/// What a position can see of its neighborhood at bias time.
///
/// `predicted_*` is filled exactly when the strategy needs a prediction and
/// the actual neighbor is missing. `at_sequence_start` / `at_sequence_end`
/// mark positions with no neighbor slot on that side at all (position 0 with
/// an empty prompt, and position n-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborView {
    pub left: Option<TokenId>,
    pub right: Option<TokenId>,
    pub predicted_left: Option<TokenId>,
    pub predicted_right: Option<TokenId>,
    pub at_sequence_start: bool,
    pub at_sequence_end: bool,
}

/// Argmax of the position's current logit row, lowest index on ties.
pub fn predict_neighbor<R: RowSource>(rows: &R, pos: usize) -> Result<TokenId, StrategyError> {
    let row = rows.row(pos).ok_or(StrategyError::RowUnavailable { pos })?;
    Ok(TokenId(argmax_lowest(row) as u32))
}

/// Assemble the neighbor view for `pos`: actual neighbors from the state,
/// predictions from the current frame where the strategy needs them.
pub fn neighbor_view<R: RowSource>(
    state: &DenoiseState,
    rows: &R,
    pos: usize,
    kind: StrategyKind,
) -> Result<NeighborView, StrategyError> {
    let n = state.len();
    if pos >= n {
        return Err(StrategyError::PositionOutOfRange { pos, len: n });
    }
    let left = state.left_context(pos);
    let right = state.right_context(pos);
    let at_sequence_start = pos == 0 && state.prompt().is_empty();
    let at_sequence_end = pos + 1 == n;
    let predicted_left = if kind.predicts_left() && left.is_none() && !at_sequence_start {
        Some(predict_neighbor(rows, pos - 1)?)
    } else {
        None
    };
    let predicted_right = if kind.predicts_right() && right.is_none() && !at_sequence_end {
        Some(predict_neighbor(rows, pos + 1)?)
    } else {
        None
    };
    Ok(NeighborView {
        left,
        right,
        predicted_left,
        predicted_right,
        at_sequence_start,
        at_sequence_end,
    })
}

/// One side's contribution to the bias.
enum Term {
    Skip,
    Uniform,
    Members(Bitset),
}

/// A strategy bound to its key and green-list structure.
pub struct StrategyBias<'a> {
    kind: StrategyKind,
    key: WatermarkKey,
    matrix: &'a dyn GreenLookup,
}

impl<'a> StrategyBias<'a> {
    pub fn new(
        kind: StrategyKind,
        key: WatermarkKey,
        matrix: &'a dyn GreenLookup,
    ) -> Result<Self, StrategyError> {
        if key.fingerprint() != matrix.key_fingerprint() {
            return Err(StrategyError::FingerprintMismatch {
                key: key.fingerprint(),
                matrix: matrix.key_fingerprint(),
            });
        }
        Ok(StrategyBias { kind, key, matrix })
    }

    #[inline]
    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    #[inline]
    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }

    #[inline]
    pub fn vocab_size(&self) -> u32 {
        self.matrix.vocab_size()
    }

    /// Add the strategy's bias to `row` in place.
    pub fn bias_row(&self, nb: &NeighborView, row: &mut [f32]) -> Result<(), StrategyError> {
        let vocab = self.matrix.vocab_size() as usize;
        if row.len() != vocab {
            return Err(StrategyError::RowLengthMismatch {
                expected: vocab,
                got: row.len(),
            });
        }
        let forward = match self.kind {
            StrategyKind::Direct | StrategyKind::Bidirectional => match nb.left {
                Some(u) => Term::Members(self.matrix.forward_green(u)?),
                None => Term::Skip,
            },
            StrategyKind::Predictive | StrategyKind::PredictiveBidirectional => {
                match nb.left.or(nb.predicted_left) {
                    Some(u) => Term::Members(self.matrix.forward_green(u)?),
                    None if nb.at_sequence_start => Term::Uniform,
                    None => {
                        return Err(StrategyError::MissingPrediction {
                            side: "left",
                            pos: 0,
                        })
                    }
                }
            }
        };
        let backward = match self.kind {
            StrategyKind::Direct | StrategyKind::Predictive => Term::Skip,
            StrategyKind::Bidirectional => match nb.right {
                Some(w) => Term::Members(self.matrix.backward_green(w)?),
                None => Term::Skip,
            },
            StrategyKind::PredictiveBidirectional => match nb.right.or(nb.predicted_right) {
                Some(w) => Term::Members(self.matrix.backward_green(w)?),
                None if nb.at_sequence_end => Term::Uniform,
                None => {
                    return Err(StrategyError::MissingPrediction {
                        side: "right",
                        pos: 0,
                    })
                }
            },
        };
        let delta = self.key.delta() as f32;
        if delta == 0.0 {
            return Ok(());
        }
        for term in [forward, backward] {
            match term {
                Term::Skip => {}
                Term::Uniform => {
                    for x in row.iter_mut() {
                        *x += delta;
                    }
                }
                Term::Members(set) => {
                    for (wi, &word) in set.words().iter().enumerate() {
                        let mut w = word;
                        while w != 0 {
                            let b = w.trailing_zeros() as usize;
                            row[wi * 64 + b] += delta;
                            w &= w - 1;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Convenience for the decode loop: build the neighbor view for `pos`
    /// from the current state and frame, then bias the row.
    pub fn bias_position<R: RowSource>(
        &self,
        state: &DenoiseState,
        rows: &R,
        pos: usize,
        row: &mut [f32],
    ) -> Result<(), StrategyError> {
        let nb = neighbor_view(state, rows, pos, self.kind)?;
        self.bias_row(&nb, row)
    }
}

impl std::fmt::Debug for StrategyBias<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StrategyBias")
            .field("kind", &self.kind)
            .field("gamma", &self.key.gamma())
            .field("delta", &self.key.delta())
            .field("vocab_size", &self.matrix.vocab_size())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::GreenMatrix;
    use crate::partition::{KeyedPartition, WatermarkKey};
    use crate::toy::decode::all_position_logits;
    use crate::toy::model::ToyLm;

    const V: u32 = 8;

    fn setup(delta: f64) -> (WatermarkKey, KeyedPartition, GreenMatrix) {
        let key = WatermarkKey::new(13, 0.5, delta).unwrap();
        let partition = KeyedPartition::new(key, V).unwrap();
        let matrix = GreenMatrix::build(&partition).unwrap();
        (key, partition, matrix)
    }

    fn nb(left: Option<u32>, right: Option<u32>) -> NeighborView {
        NeighborView {
            left: left.map(TokenId),
            right: right.map(TokenId),
            predicted_left: None,
            predicted_right: None,
            at_sequence_start: false,
            at_sequence_end: false,
        }
    }

    #[test]
    fn zero_delta_never_changes_rows() {
        let (key, _, matrix) = setup(0.0);
        let base: Vec<f32> = (0..V).map(|i| i as f32 * 0.1).collect();
        for kind in StrategyKind::ALL {
            let s = StrategyBias::new(kind, key, &matrix).unwrap();
            let mut row = base.clone();
            let mut view = nb(Some(1), Some(2));
            view.predicted_left = Some(TokenId(0));
            view.predicted_right = Some(TokenId(0));
            s.bias_row(&view, &mut row).unwrap();
            assert_eq!(row, base, "kind {kind:?}");
        }
    }

    #[test]
    fn bidirectional_tiers_match_brute_force() {
        // Added bias per token is 0, delta, or 2*delta according to
        // membership in both lists, enumerated directly from the partition.
        let (key, partition, matrix) = setup(2.0);
        let s = StrategyBias::new(StrategyKind::Bidirectional, key, &matrix).unwrap();
        let (left, right) = (TokenId(3), TokenId(6));
        let mut row = vec![0.0f32; V as usize];
        s.bias_row(&nb(Some(left.0), Some(right.0)), &mut row).unwrap();
        for v in 0..V {
            let mut expect = 0.0f32;
            if partition.is_green(left, TokenId(v)) {
                expect += 2.0;
            }
            if partition.is_green(TokenId(v), right) {
                expect += 2.0;
            }
            assert_eq!(row[v as usize], expect, "token {v}");
        }
    }

    #[test]
    fn direct_vs_predictive_case_split() {
        let (key, _, matrix) = setup(2.0);
        let base = vec![0.0f32; V as usize];

        // No left context: direct leaves the row untouched.
        let direct = StrategyBias::new(StrategyKind::Direct, key, &matrix).unwrap();
        let mut row = base.clone();
        direct.bias_row(&nb(None, None), &mut row).unwrap();
        assert_eq!(row, base);

        // Same inputs with a prediction: predictive shifts exactly one green
        // set by delta.
        let predictive = StrategyBias::new(StrategyKind::Predictive, key, &matrix).unwrap();
        let mut view = nb(None, None);
        view.predicted_left = Some(TokenId(5));
        let mut row = base.clone();
        predictive.bias_row(&view, &mut row).unwrap();
        let greens = matrix.forward_green(TokenId(5)).unwrap();
        for v in 0..V as usize {
            let expect = if greens.get(v) { 2.0 } else { 0.0 };
            assert_eq!(row[v], expect, "token {v}");
        }
    }

    #[test]
    fn predictive_missing_prediction_is_contract_violation() {
        let (key, _, matrix) = setup(2.0);
        let s = StrategyBias::new(StrategyKind::Predictive, key, &matrix).unwrap();
        let mut row = vec![0.0f32; V as usize];
        assert!(matches!(
            s.bias_row(&nb(None, None), &mut row),
            Err(StrategyError::MissingPrediction { side: "left", .. })
        ));
    }

    #[test]
    fn pred_bidir_sequence_end_is_uniform_backward_shift() {
        let (key, _, matrix) = setup(2.0);
        let s =
            StrategyBias::new(StrategyKind::PredictiveBidirectional, key, &matrix).unwrap();
        let mut view = nb(Some(1), None);
        view.at_sequence_end = true;
        let mut row = vec![0.0f32; V as usize];
        s.bias_row(&view, &mut row).unwrap();
        let greens = matrix.forward_green(TokenId(1)).unwrap();
        for v in 0..V as usize {
            let expect = 2.0 + if greens.get(v) { 2.0 } else { 0.0 };
            assert_eq!(row[v], expect, "token {v}");
        }
    }

    #[test]
    fn bias_tier_structure() {
        // Biased minus original takes at most {0, d} for the one-sided
        // strategies and {0, d, 2d} for the two-sided ones.
        let (key, _, matrix) = setup(1.5);
        for kind in StrategyKind::ALL {
            let s = StrategyBias::new(kind, key, &matrix).unwrap();
            let mut view = nb(Some(2), Some(4));
            view.predicted_left = Some(TokenId(0));
            view.predicted_right = Some(TokenId(0));
            let mut row = vec![0.0f32; V as usize];
            s.bias_row(&view, &mut row).unwrap();
            let allowed: &[f32] = match kind {
                StrategyKind::Direct | StrategyKind::Predictive => &[0.0, 1.5],
                _ => &[0.0, 1.5, 3.0],
            };
            for (v, &x) in row.iter().enumerate() {
                assert!(allowed.contains(&x), "kind {kind:?} token {v} bias {x}");
            }
        }
    }

    #[test]
    fn bidir_equals_pred_bidir_with_both_neighbors() {
        let (key, _, matrix) = setup(2.0);
        let bidir = StrategyBias::new(StrategyKind::Bidirectional, key, &matrix).unwrap();
        let pbidir =
            StrategyBias::new(StrategyKind::PredictiveBidirectional, key, &matrix).unwrap();
        for left in 0..V {
            for right in 0..V {
                let view = nb(Some(left), Some(right));
                let mut a = vec![0.25f32; V as usize];
                let mut b = vec![0.25f32; V as usize];
                bidir.bias_row(&view, &mut a).unwrap();
                pbidir.bias_row(&view, &mut b).unwrap();
                assert_eq!(a, b, "left {left} right {right}");
            }
        }
    }

    #[test]
    fn argmax_dominance_with_large_delta() {
        // With delta above any logit gap, the chosen token must fall in the
        // operative green set; for the two-sided strategy it falls in the
        // intersection tier when that tier is nonempty, otherwise the union.
        let (_, partition, matrix) = setup(2.0);
        let key = WatermarkKey::new(13, 0.5, 100.0).unwrap();
        let base: Vec<f32> = (0..V).map(|i| (i as f32 * 0.37).sin()).collect();

        let s = StrategyBias::new(StrategyKind::Direct, key, &matrix).unwrap();
        for left in 0..V {
            let mut row = base.clone();
            s.bias_row(&nb(Some(left), None), &mut row).unwrap();
            let chosen = argmax_lowest(&row) as u32;
            assert!(partition.is_green(TokenId(left), TokenId(chosen)));
        }

        let s =
            StrategyBias::new(StrategyKind::PredictiveBidirectional, key, &matrix).unwrap();
        for left in 0..V {
            for right in 0..V {
                let mut row = base.clone();
                s.bias_row(&nb(Some(left), Some(right)), &mut row).unwrap();
                let chosen = TokenId(argmax_lowest(&row) as u32);
                let fwd = |v: TokenId| partition.is_green(TokenId(left), v);
                let bwd = |v: TokenId| partition.is_green(v, TokenId(right));
                let intersection_nonempty = (0..V).any(|v| fwd(TokenId(v)) && bwd(TokenId(v)));
                if intersection_nonempty {
                    assert!(fwd(chosen) && bwd(chosen), "left {left} right {right}");
                } else {
                    assert!(fwd(chosen) || bwd(chosen), "left {left} right {right}");
                }
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let (_, _, matrix) = setup(2.0);
        let other = WatermarkKey::new(14, 0.5, 2.0).unwrap();
        assert!(matches!(
            StrategyBias::new(StrategyKind::Direct, other, &matrix),
            Err(StrategyError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn neighbor_view_assembly() {
        let model = ToyLm::random(V, 3, 0.5);
        let key = WatermarkKey::new(13, 0.5, 2.0).unwrap();

        // Prompted sequence: position 0 sees the prompt tail as left.
        let state = DenoiseState::new(&[TokenId(6)], 4, 4, 4).unwrap();
        let frame = all_position_logits(&model, &state);
        let view = neighbor_view(&state, &frame, 0, StrategyKind::Direct).unwrap();
        assert_eq!(view.left, Some(TokenId(6)));
        assert!(!view.at_sequence_start);

        // Interior position with both neighbors masked: bidirectional gets
        // no context, predictive-bidirectional gets both predictions.
        let view = neighbor_view(&state, &frame, 2, StrategyKind::Bidirectional).unwrap();
        assert_eq!(view, nb(None, None));
        let view =
            neighbor_view(&state, &frame, 2, StrategyKind::PredictiveBidirectional).unwrap();
        assert!(view.predicted_left.is_some() && view.predicted_right.is_some());

        // Predictions are the rows' argmaxes.
        assert_eq!(
            view.predicted_left.unwrap().0 as usize,
            argmax_lowest(frame.row_slice(1))
        );

        // Last position is flagged as sequence end and gets no right
        // prediction.
        let view =
            neighbor_view(&state, &frame, 3, StrategyKind::PredictiveBidirectional).unwrap();
        assert!(view.at_sequence_end && view.predicted_right.is_none());

        // Empty prompt: position 0 is the sequence start.
        let state2 = DenoiseState::new(&[], 4, 4, 4).unwrap();
        let frame2 = all_position_logits(&model, &state2);
        let view = neighbor_view(&state2, &frame2, 0, StrategyKind::Predictive).unwrap();
        assert!(view.at_sequence_start && view.predicted_left.is_none());
        // The bias still applies cleanly: uniform forward shift.
        let matrix = GreenMatrix::build(&KeyedPartition::new(key, V).unwrap()).unwrap();
        let s = StrategyBias::new(StrategyKind::Predictive, key, &matrix).unwrap();
        let mut row = vec![0.0f32; V as usize];
        s.bias_row(&view, &mut row).unwrap();
        assert!(row.iter().all(|&x| x == 2.0));

        // Out of range.
        assert!(matches!(
            neighbor_view(&state, &frame, 9, StrategyKind::Direct),
            Err(StrategyError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn predict_neighbor_rules() {
        let model = ToyLm::random(V, 3, 0.5);
        let state = DenoiseState::new(&[], 3, 3, 3).unwrap();
        let frame = all_position_logits(&model, &state);
        // Uniform row: tie resolves to index 0.
        let uniform = ToyLm::from_tables(V, 0.5, vec![1.0; 8], vec![0.0; 64]).unwrap();
        let uframe = all_position_logits(&uniform, &state);
        assert_eq!(predict_neighbor(&uframe, 1).unwrap(), TokenId(0));
        // One-hot row: that index.
        let mut unigram = vec![0.0f32; 8];
        unigram[5] = 3.0;
        let onehot = ToyLm::from_tables(V, 0.5, unigram, vec![0.0; 64]).unwrap();
        let oframe = all_position_logits(&onehot, &state);
        assert_eq!(predict_neighbor(&oframe, 0).unwrap(), TokenId(5));
        // Out of range position.
        assert!(matches!(
            predict_neighbor(&frame, 7),
            Err(StrategyError::RowUnavailable { pos: 7 })
        ));
    }
}
