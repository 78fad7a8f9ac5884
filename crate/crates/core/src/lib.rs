//! Green-list watermarking for masked-denoising (diffusion-style) text
//! generation, at desk scale.
//!
//! The pieces: a keyed pseudo-random vocabulary partition ([`partition`]),
//! a precomputed green matrix with forward-row / backward-column lookups
//! ([`matrix`]), a toy denoising decoder ([`toy`]), four bias strategies
//! covering forward, backward, and predicted context ([`strategy`]),
//! forward z-score detection with empirical threshold calibration
//! ([`detect`]), token-level robustness attacks ([`attack`]), and the
//! experiment harness behind the `dmark` CLI ([`harness`]).

pub mod attack;
pub mod bitset;
pub mod detect;
pub mod harness;
pub mod matrix;
pub mod partition;
pub mod strategy;
pub mod toy;

pub use attack::{AttackError, AttackKind, AttackOutcome, AttackSpec, ExternalTransform};
pub use bitset::Bitset;
pub use detect::{
    calibrate, calibrate_scores, evaluate, evaluate_scores, score, z_score, Calibration,
    DetectError, DetectionReport, ThresholdEntry, TprRow, TprTable,
};
pub use matrix::{GreenLookup, GreenMatrix, MatrixError, VirtualGreenMatrix};
pub use partition::{
    mix64, uniform_score, uniform_score_bits, ContextHash, KeyError, KeyedPartition, TokenId,
    WatermarkKey, SCHEME_VERSION,
};
pub use strategy::{
    neighbor_view, predict_neighbor, NeighborView, StrategyBias, StrategyError, StrategyKind,
};
pub use toy::{
    all_position_logits, decode, decode_traced, select_unmask_positions, DecodeError, DecodeTrace,
    DenoiseState, LogitFrame, RowSource, Sampler, ToyLm, ToyModelError,
};
