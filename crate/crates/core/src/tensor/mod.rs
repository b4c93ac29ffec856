//! Minimal reverse-mode automatic differentiation over row-major tensors.

mod check;
mod graph;
mod params;

pub use check::{finite_difference_check, relative_error, GradCheck, REL_ERROR_FLOOR};
pub use graph::{Graph, Var};
pub use params::{AdamConfig, CosineSchedule, Param, ParamStore, StoreState};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("index {index} out of range {bound} in {op}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("{0} needs at least one input")]
    Empty(&'static str),
    #[error("backward called twice on the same graph without zero_grad")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("optimizer step with no gradients")]
    NoGradients,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
