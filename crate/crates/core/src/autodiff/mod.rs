//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! A [`Graph`] is an arena of nodes in creation order, so the node vector is
//! already a topological order of the computation. Ops take [`Var`] handles
//! and return new handles; [`Graph::backward`] walks the arena once in reverse.

mod gradcheck;
mod graph;
mod tensor;

pub(crate) use gradcheck::random_tensor;
pub use gradcheck::{
    central_difference, grad_check, grad_check_many, CoordinateSelection, GradCheckReport,
};
pub use graph::{Graph, Unfold2d, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("invalid shape {shape:?}: every extent must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a single-element output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward output does not depend on any tensor that requires grad")]
    NoGradPath,
    #[error("function value is not finite ({value}) at coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },
}
