//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated. [`Graph::backward`]
//! walks the record in reverse and returns a [`Gradients`] table for every
//! node that depends on a parameter leaf. The hard threshold node used for
//! singular value masks has a straight-through backward: the incoming
//! gradient passes unchanged.

mod adam;
pub(crate) mod gemm;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig, Optimizer, Sgd};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward called before any forward computation")]
    NoForward,
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
}
