//! Reverse-mode automatic differentiation over batches of dense matrices.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! walks the record once in reverse. Operands whose batch dimension is 1
//! broadcast against batched operands, which is how shared parameters meet
//! per-sequence state.

mod graph;
pub mod kernels;
mod matrix;

use thiserror::Error;

pub use matrix::Matrix;
pub use graph::{sigmoid, softplus, softplus_inverse, Axis, BinaryOp, Graph, Shape, Tensor, UnaryOp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("invalid shape {shape} for {op}")]
    InvalidShape { op: &'static str, shape: Shape },
    #[error("{len} values do not fill shape {shape}")]
    LengthMismatch { len: usize, shape: Shape },
    #[error("index {index} out of range {extent} in {op}")]
    OutOfRange { op: &'static str, index: usize, extent: usize },
    #[error("{op} needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("singular matrix in {op}")]
    Singular { op: &'static str },
    #[error("cholesky input is not positive definite")]
    NotPositiveDefinite,
    #[error("backward needs a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("backward already ran on this graph")]
    BackwardTwice,
}
