//! Dense matrices, reverse-mode gradients and the SGD update.
//!
//! All reductions run in a fixed left-to-right order so results are
//! bit-reproducible.

mod matrix;
mod optim;
mod tape;

use thiserror::Error;

pub use matrix::{argmax, l2_normalize_rows, log_softmax_rows, matmul, softmax_rows, Matrix};
pub use optim::Sgd;
pub use tape::{GradientTape, Gradients, Var};

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("cannot build {rows}x{cols} matrix from {len} values")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("row {row} has zero norm; the embedding has collapsed")]
    DegenerateEmbedding { row: usize },
    #[error("row range {start}..{end} out of bounds for {rows} rows")]
    RowRange {
        start: usize,
        end: usize,
        rows: usize,
    },
    #[error("reduction over an empty matrix")]
    EmptyReduction,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("loss must be 1x1, got {}x{}", shape.0, shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("expected {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("invalid {name}: {value}")]
    InvalidHyperparameter { name: &'static str, value: f64 },
}

impl KernelError {
    pub(crate) fn shape(op: &'static str, a: &Matrix, b: &Matrix) -> Self {
        KernelError::DimensionMismatch {
            op,
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        }
    }
}
