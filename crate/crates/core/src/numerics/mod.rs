//! Dense `f64` matrices with tape-based reverse-mode differentiation.
//!
//! The primitive set is deliberately small: add, sub, mul (elementwise),
//! matmul, row gather, concat, reshape, sum, mean, scale, log-softmax, exp,
//! tanh and sigmoid. Every model and loss in the crate is composed from these.
//! There is no broadcasting; shapes must match exactly.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_against};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::logsumexp;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape {left:?} is incompatible with {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor extents must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("{rows}x{cols} tensor cannot hold {len} values")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{op}: input contains non-finite values")]
    NonFinite { op: &'static str },
    #[error("root node {root} is not on this tape ({len} nodes)")]
    RootNotOnTape { root: usize, len: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    RootNotScalar { shape: (usize, usize) },
}
