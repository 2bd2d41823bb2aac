//! Dense `f64` tensors, a reverse-mode tape, Adam, and the text tensor format
//! used by checkpoints.

mod adam;
mod store;
mod tape;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use store::{decode_tensors, encode_tensors, read_tensor_file, write_tensor_file, ParamStore};
pub use tape::{Gradients, RowGroups, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
