//! Dense tensors, reverse-mode gradients, Adam and finite-difference checks.
//!
//! Everything is computed in `f64`. The model builds a fresh [`Tape`] per
//! example, binds its [`ParamStore`] onto it as leaves, and reads parameter
//! gradients back after [`Tape::backward`].

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
pub mod suite;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, CKPT_MAGIC};
pub use gradcheck::{
    central_difference, check_gradients, check_gradients_at, relative_error, GradCheckReport,
};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    ValueCount { shape: Vec<usize>, len: usize },
    #[error("tensors have at most 3 axes, got {shape:?}")]
    Rank { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
