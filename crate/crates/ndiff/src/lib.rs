//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records operations as they execute. Parameters are registered
//! by name; [`grad_of`] sweeps the tape backwards and returns the gradient of
//! a scalar loss for each of them. [`finite_diff_check`] verifies analytic
//! gradients against central differences.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_sampled, GradCheck};
pub use graph::{grad_of, log_sum_exp, softmax, Graph, NodeId};
pub use tensor::{Params, Tensor, MAX_RANK};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty-index-set")]
    EmptyIndexSet,
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rank {0} exceeds the supported maximum")]
    RankTooLarge(usize),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: empty input list")]
    EmptyInput(&'static str),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{0}' registered twice")]
    DuplicateParam(String),
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("{0}")]
    InvalidArgument(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
