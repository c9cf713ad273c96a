//! Reverse-mode autodiff over dense f64 tensors.
//!
//! Everything is f64 and row-major. A [`Tape`] records one computation and
//! is dropped after `backward`; parameters live outside the tape in
//! [`ParamGroup`]s and receive accumulated gradients through the leaf
//! bindings created by [`Tape::param`].

mod checkpoint;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use optim::{clip_global_norm, ema_update, Adam, AdamConfig};
pub use tape::{concat_cols, concat_rows, Tape, Var};
pub use tensor::{Param, ParamGroup, Tensor};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
///
/// Shape checks fail loudly: there is no implicit broadcast anywhere in the
/// op set beyond the documented row-bias case.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for dimension of size {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("loss is not finite: {context}")]
    NonFinite { context: String },
    #[error("vars from different tapes passed to {op}")]
    TapeMismatch { op: &'static str },
    #[error("unknown parameter {name} in group {group}")]
    UnknownParam { group: String, name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;
