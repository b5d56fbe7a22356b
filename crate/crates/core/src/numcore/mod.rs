//! Dense tensors, tape-based reverse-mode differentiation, Adam, and the
//! binary checkpoint format shared by every trainable model.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{Bound, ParamGrads, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul_plain, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds ({bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
