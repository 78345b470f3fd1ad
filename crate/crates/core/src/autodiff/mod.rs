//! Minimal dense reverse-mode automatic differentiation and the decayed
//! Adagrad optimizer.

mod graph;
mod optim;
mod params;
mod tensor;

use alloc::string::String;

use thiserror::Error;

pub use graph::{
    argmax, cosine, dot, log_sum_exp, norm, sigmoid, softmax, Graph, NodeId, OpKind, COSINE_EPS,
    PROB_FLOOR,
};
pub use optim::{Adagrad, AdagradConfig};
pub use params::{GradStore, ParamId, ParamStore};
pub use tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: unsupported input shape {shape}")]
    InvalidShape { op: &'static str, shape: Shape },
    #[error("{op}: expected {expected} inputs, got {found}")]
    Arity {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward needs a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("parameter `{name}` has shape {expected}, got {found}")]
    ParamShape {
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error("gradient/accumulator layout does not match the parameter store")]
    StoreLayout,
}
