//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape is built by running ordinary code against a [`Graph`]; every op
//! returns a new [`Var`]. Binary elementwise ops broadcast numpy style
//! (shapes right-aligned, each dimension equal or 1). After
//! [`Graph::backward`] the graph is consumed: a second sweep is an error
//! rather than a silent doubling of gradients.

mod broadcast;
mod conv;
mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} cannot hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: no operands")]
    Empty(&'static str),
    #[error("loss does not depend on any tracked tensor")]
    Untracked,
    #[error("graph was already consumed by backward")]
    Consumed,
    #[error("graph was cleared")]
    Cleared,
    #[error("variable belongs to another graph")]
    ForeignVar,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[cfg(test)]
mod tests;
