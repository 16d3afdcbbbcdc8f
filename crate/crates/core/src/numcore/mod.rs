//! Dense-network kernel: matrices, MLP and GRU forward passes with
//! reverse-mode tapes, and the Adam update.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); batches are
//! row-major matrices with one sample per row.

mod adam;
mod dense;
mod gru;
mod matrix;
mod scalar;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dense::{mlp_forward, sigmoid, Activation, DenseLayer, Dropout, Mlp, MlpCache, MlpTape};
pub use gru::{gru_forward, GruCache, GruCell, GruStack, GruTape};
pub use matrix::{dot, gemm, norm2, Matrix};
pub use scalar::Scalar;
pub use tape::{GradientTape, Parameterized};

use thiserror::Error;

/// Concrete RNG type to name when a dropout-free pass needs a type argument.
pub type NoRng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumError {
    #[error("layer {layer}: expected width {expected}, got {found}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("{what}: expected length {expected}, got {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}
