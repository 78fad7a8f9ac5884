//! Toy masked-denoising generator: the model tables and the unmasking loop.

pub mod decode;
pub mod model;

pub use decode::{
    all_position_logits, decode, decode_traced, select_unmask_positions, DecodeError, DecodeTrace,
    DenoiseState, LogitFrame, RowSource, Sampler,
};
pub use model::{ToyLm, ToyModelError};
