//! Dense `f64` tensors with a tape-based reverse-mode differentiator.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, Gradients, Graph, Node, NodeId, Op};
pub use params::{BoundParams, ParamSet};
pub use tensor::{Tensor, TENSOR_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient at input {input}, coordinate {coordinate}")]
    NonFiniteGradient { input: usize, coordinate: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("tensor format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
