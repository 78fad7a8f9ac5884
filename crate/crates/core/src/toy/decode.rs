//! Iterative unmasking: all-position logits, confidence-ranked position
//! selection, optional per-position logit bias, and block decoding.
//!
//! Finalized tokens are never revisited, so the finalized count grows
//! monotonically until the sequence completes.

use thiserror::Error;

use crate::partition::{mix64, TokenId};
use crate::strategy::{StrategyBias, StrategyError};
use crate::toy::model::ToyLm;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("sequence length must be at least 1")]
    EmptySequence,
    #[error("block size {block_size} does not divide sequence length {n}")]
    BadBlockSize { n: usize, block_size: usize },
    #[error(
        "schedule infeasible: {steps} steps cannot cover {num_blocks} blocks of {block_size}"
    )]
    InfeasibleSchedule {
        steps: u32,
        num_blocks: usize,
        block_size: usize,
    },
    #[error("prompt token {token} out of range for vocabulary of {vocab_size}")]
    PromptTokenOutOfRange { token: u32, vocab_size: u32 },
    #[error("bias vocabulary {bias} does not match model vocabulary {model}")]
    VocabMismatch { model: u32, bias: u32 },
    #[error("bias failed: {0}")]
    Strategy(#[from] StrategyError),
}

/// The evolving sequence: per-position token-or-MASK, finalization flags,
/// the step counter, block geometry, and the fixed prompt prefix.
#[derive(Debug, Clone)]
pub struct DenoiseState {
    tokens: Vec<Option<TokenId>>,
    finalized: Vec<bool>,
    step: u32,
    total_steps: u32,
    block_size: usize,
    prompt: Vec<TokenId>,
}

impl DenoiseState {
    pub fn new(
        prompt: &[TokenId],
        n: usize,
        total_steps: u32,
        block_size: usize,
    ) -> Result<Self, DecodeError> {
        if n == 0 {
            return Err(DecodeError::EmptySequence);
        }
        if block_size == 0 || (n % block_size != 0 && block_size != n) {
            return Err(DecodeError::BadBlockSize { n, block_size });
        }
        Ok(DenoiseState {
            tokens: vec![None; n],
            finalized: vec![false; n],
            step: 0,
            total_steps,
            block_size: block_size.min(n),
            prompt: prompt.to_vec(),
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn step(&self) -> u32 {
        self.step
    }

    #[inline]
    pub fn total_steps(&self) -> u32 {
        self.total_steps
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    #[inline]
    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    #[inline]
    pub fn is_finalized(&self, pos: usize) -> bool {
        self.finalized[pos]
    }

    #[inline]
    pub fn token_at(&self, pos: usize) -> Option<TokenId> {
        self.tokens[pos]
    }

    /// Left context of `pos`: the finalized token at `pos - 1`, or the last
    /// prompt token when `pos == 0`.
    pub fn left_context(&self, pos: usize) -> Option<TokenId> {
        if pos == 0 {
            self.prompt.last().copied()
        } else if self.finalized[pos - 1] {
            self.tokens[pos - 1]
        } else {
            None
        }
    }

    /// Right context of `pos`: the finalized token at `pos + 1`.
    pub fn right_context(&self, pos: usize) -> Option<TokenId> {
        if pos + 1 < self.tokens.len() && self.finalized[pos + 1] {
            self.tokens[pos + 1]
        } else {
            None
        }
    }

    /// Position range of the lowest block that still has masked positions;
    /// `None` once the whole sequence is finalized. Blocks open in order.
    pub fn active_block(&self) -> Option<std::ops::Range<usize>> {
        let first = self.finalized.iter().position(|f| !f)?;
        let b = first / self.block_size;
        Some(b * self.block_size..(b + 1) * self.block_size)
    }

    pub fn is_complete(&self) -> bool {
        self.finalized.iter().all(|&f| f)
    }

    fn finalize(&mut self, pos: usize, token: TokenId) {
        debug_assert!(!self.finalized[pos], "position finalized twice");
        self.tokens[pos] = Some(token);
        self.finalized[pos] = true;
    }
}

/// Access to per-position logit rows, satisfied by both the full
/// [`LogitFrame`] and the windowed frame the decode loop maintains.
pub trait RowSource {
    fn vocab_size(&self) -> u32;
    /// Row for a position, `None` when the source did not compute one
    /// (finalized position, or outside the source's window).
    fn row(&self, pos: usize) -> Option<&[f32]>;
}

/// Logits for every non-finalized position plus per-position confidences
/// (max post-softmax probability of the pre-bias row). Rows for finalized
/// positions are zero-filled and must be ignored by consumers.
#[derive(Debug, Clone)]
pub struct LogitFrame {
    vocab_size: u32,
    n: usize,
    logits: Vec<f32>,
    confidences: Vec<f64>,
    computed: Vec<bool>,
}

impl LogitFrame {
    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn confidence(&self, pos: usize) -> f64 {
        self.confidences[pos]
    }

    #[inline]
    pub fn row_slice(&self, pos: usize) -> &[f32] {
        let v = self.vocab_size as usize;
        &self.logits[pos * v..(pos + 1) * v]
    }
}

impl RowSource for LogitFrame {
    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn row(&self, pos: usize) -> Option<&[f32]> {
        if pos < self.n && self.computed[pos] {
            Some(self.row_slice(pos))
        } else {
            None
        }
    }
}

/// Max post-softmax probability of a row, accumulated in f64.
fn confidence_of(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
    1.0 / sum
}

/// Lowest-index argmax.
pub(crate) fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = row[0];
    let mut idx = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > best {
            best = x;
            idx = i;
        }
    }
    idx
}

/// Compute logits and confidences for every non-finalized position of the
/// whole sequence.
pub fn all_position_logits(model: &ToyLm, state: &DenoiseState) -> LogitFrame {
    let v = model.vocab_size() as usize;
    let n = state.len();
    let mut logits = vec![0.0f32; n * v];
    let mut confidences = vec![f64::NEG_INFINITY; n];
    let mut computed = vec![false; n];
    for pos in 0..n {
        if state.is_finalized(pos) {
            continue;
        }
        let row = &mut logits[pos * v..(pos + 1) * v];
        model.row_into(state.left_context(pos), state.right_context(pos), row);
        confidences[pos] = confidence_of(row);
        computed[pos] = true;
    }
    LogitFrame {
        vocab_size: model.vocab_size(),
        n,
        logits,
        confidences,
        computed,
    }
}

/// The `k` highest-confidence non-finalized positions inside the active
/// block, ties broken toward the lower index. Empty when the sequence is
/// complete.
pub fn select_unmask_positions(frame: &LogitFrame, state: &DenoiseState, k: usize) -> Vec<usize> {
    assert!(k >= 1, "k must be at least 1");
    let Some(block) = state.active_block() else {
        return Vec::new();
    };
    let mut candidates: Vec<usize> = block.filter(|&p| !state.is_finalized(p)).collect();
    candidates.sort_by(|&a, &b| {
        frame
            .confidence(b)
            .partial_cmp(&frame.confidence(a))
            .unwrap()
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    candidates.sort_unstable();
    candidates
}

/// Token choice rule. Temperature 0 is argmax with lowest-index tie-break;
/// positive temperature samples the softmax with a counter-based stream
/// keyed by (seed, step, position), so parallel callers stay deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Argmax,
    Temperature { temperature: f64, seed: u64 },
}

impl Sampler {
    pub fn from_temperature(temperature: f64, seed: u64) -> Self {
        assert!(
            temperature.is_finite() && temperature >= 0.0,
            "temperature must be finite and non-negative"
        );
        if temperature == 0.0 {
            Sampler::Argmax
        } else {
            Sampler::Temperature { temperature, seed }
        }
    }

    pub(crate) fn pick(&self, row: &[f32], step: u32, pos: usize) -> TokenId {
        match *self {
            Sampler::Argmax => TokenId(argmax_lowest(row) as u32),
            Sampler::Temperature { temperature, seed } => {
                let u = {
                    let bits = mix64(mix64(seed, step as u64), pos as u64);
                    (bits >> 11) as f64 / (1u64 << 53) as f64
                };
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f64> = row
                    .iter()
                    .map(|&x| (((x - max) as f64) / temperature).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let target = u * total;
                let mut acc = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if acc > target {
                        return TokenId(i as u32);
                    }
                }
                TokenId(row.len() as u32 - 1)
            }
        }
    }
}

/// Per-position record of how a decode unfolded.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub tokens: Vec<TokenId>,
    /// Step at which each position was finalized.
    pub finalize_step: Vec<u32>,
    /// Whether the position's left context existed when it was finalized.
    pub left_present: Vec<bool>,
    /// Whether the position's right context existed when it was finalized.
    pub right_present: Vec<bool>,
}

impl DecodeTrace {
    /// Fraction of positions whose left context existed at finalization.
    pub fn context_available_frac(&self) -> f64 {
        let n = self.left_present.len();
        self.left_present.iter().filter(|&&b| b).count() as f64 / n as f64
    }

    /// Fraction of positions finalized strictly before their left neighbor
    /// (position 0 has no left neighbor and never counts).
    pub fn out_of_order_frac(&self) -> f64 {
        let n = self.finalize_step.len();
        if n <= 1 {
            return 0.0;
        }
        let count = (1..n)
            .filter(|&i| self.finalize_step[i] < self.finalize_step[i - 1])
            .count();
        count as f64 / (n - 1) as f64
    }
}

/// Windowed frame over `[start, end)` with row reuse across steps: only rows
/// whose neighborhood changed are recomputed.
struct BlockFrame {
    start: usize,
    end: usize,
    vocab: usize,
    rows: Vec<f32>,
    conf: Vec<f64>,
    valid: Vec<bool>,
}

impl BlockFrame {
    fn compute(model: &ToyLm, state: &DenoiseState, start: usize, end: usize) -> Self {
        let vocab = model.vocab_size() as usize;
        let len = end - start;
        let mut frame = BlockFrame {
            start,
            end,
            vocab,
            rows: vec![0.0f32; len * vocab],
            conf: vec![f64::NEG_INFINITY; len],
            valid: vec![false; len],
        };
        for pos in start..end {
            frame.refresh(model, state, pos);
        }
        frame
    }

    fn refresh(&mut self, model: &ToyLm, state: &DenoiseState, pos: usize) {
        let i = pos - self.start;
        if state.is_finalized(pos) {
            self.valid[i] = false;
            self.conf[i] = f64::NEG_INFINITY;
            return;
        }
        let row = &mut self.rows[i * self.vocab..(i + 1) * self.vocab];
        model.row_into(state.left_context(pos), state.right_context(pos), row);
        self.conf[i] = confidence_of(row);
        self.valid[i] = true;
    }

    fn confidence(&self, pos: usize) -> f64 {
        self.conf[pos - self.start]
    }

    fn row_slice(&self, pos: usize) -> &[f32] {
        let i = pos - self.start;
        &self.rows[i * self.vocab..(i + 1) * self.vocab]
    }
}

impl RowSource for BlockFrame {
    fn vocab_size(&self) -> u32 {
        self.vocab as u32
    }

    fn row(&self, pos: usize) -> Option<&[f32]> {
        if pos >= self.start && pos < self.end && self.valid[pos - self.start] {
            Some(self.row_slice(pos))
        } else {
            None
        }
    }
}

/// Decode `n` tokens after `prompt` over at most `total_steps` steps.
///
/// Per step: compute the frame, pick the highest-confidence masked positions
/// of the active block, bias the selected rows (when a biaser is given),
/// choose tokens, and finalize them together against the pre-step state.
/// Fully deterministic for a given input set.
pub fn decode(
    model: &ToyLm,
    prompt: &[TokenId],
    n: usize,
    total_steps: u32,
    block_size: usize,
    sampler: Sampler,
    biaser: Option<&StrategyBias<'_>>,
) -> Result<Vec<TokenId>, DecodeError> {
    decode_traced(model, prompt, n, total_steps, block_size, sampler, biaser).map(|t| t.tokens)
}

pub fn decode_traced(
    model: &ToyLm,
    prompt: &[TokenId],
    n: usize,
    total_steps: u32,
    block_size: usize,
    sampler: Sampler,
    biaser: Option<&StrategyBias<'_>>,
) -> Result<DecodeTrace, DecodeError> {
    for t in prompt {
        if t.0 >= model.vocab_size() {
            return Err(DecodeError::PromptTokenOutOfRange {
                token: t.0,
                vocab_size: model.vocab_size(),
            });
        }
    }
    if let Some(b) = biaser {
        if b.vocab_size() != model.vocab_size() {
            return Err(DecodeError::VocabMismatch {
                model: model.vocab_size(),
                bias: b.vocab_size(),
            });
        }
    }
    let mut state = DenoiseState::new(prompt, n, total_steps, block_size)?;
    let block_size = state.block_size();
    let num_blocks = n / block_size;
    let steps_per_block = (total_steps as usize) / num_blocks;
    if steps_per_block == 0 {
        return Err(DecodeError::InfeasibleSchedule {
            steps: total_steps,
            num_blocks,
            block_size,
        });
    }
    // Constant per block; the last step of a block may finalize fewer.
    let k = block_size.div_ceil(steps_per_block);

    let mut trace = DecodeTrace {
        tokens: vec![TokenId(0); n],
        finalize_step: vec![0; n],
        left_present: vec![false; n],
        right_present: vec![false; n],
    };
    let mut row_buf = vec![0.0f32; model.vocab_size() as usize];
    let mut staged: Vec<(usize, TokenId)> = Vec::with_capacity(k);

    for block in 0..num_blocks {
        let block_start = block * block_size;
        let block_end = block_start + block_size;
        // One extra row past the block so the last in-block position can
        // still predict its right neighbor.
        let frame_end = (block_end + 1).min(n);
        let mut frame = BlockFrame::compute(model, &state, block_start, frame_end);

        for _ in 0..steps_per_block {
            let mut selected: Vec<usize> = (block_start..block_end)
                .filter(|&p| !state.is_finalized(p))
                .collect();
            if selected.is_empty() {
                break;
            }
            selected.sort_by(|&a, &b| {
                frame
                    .confidence(b)
                    .partial_cmp(&frame.confidence(a))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            selected.truncate(k);
            selected.sort_unstable();

            staged.clear();
            for &pos in &selected {
                row_buf.copy_from_slice(frame.row_slice(pos));
                if let Some(b) = biaser {
                    b.bias_position(&state, &frame, pos, &mut row_buf)?;
                }
                let token = sampler.pick(&row_buf, state.step, pos);
                staged.push((pos, token));
            }
            // Record context availability against the pre-commit state, then
            // finalize the whole step at once.
            for &(pos, _) in &staged {
                trace.finalize_step[pos] = state.step;
                trace.left_present[pos] = state.left_context(pos).is_some();
                trace.right_present[pos] = state.right_context(pos).is_some();
            }
            for &(pos, token) in &staged {
                state.finalize(pos, token);
                trace.tokens[pos] = token;
            }
            for &(pos, _) in &staged {
                frame.refresh(model, &state, pos);
                if pos > frame.start {
                    frame.refresh(model, &state, pos - 1);
                }
                if pos + 1 < frame.end {
                    frame.refresh(model, &state, pos + 1);
                }
            }
            state.step += 1;
        }
        debug_assert!(
            (block_start..block_end).all(|p| state.is_finalized(p)),
            "block not finished within its step budget"
        );
    }
    Ok(trace)
}
