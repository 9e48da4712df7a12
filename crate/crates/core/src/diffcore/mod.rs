//! Minimal reverse-mode differentiable math over dense `f64` arrays.
//!
//! Provides the tensors, the define-by-run graph with affine layers,
//! pointwise nonlinearities, Gaussian reparameterization, and the loss
//! primitives the models are built from, plus the deterministic RNG every
//! other module draws from. No convolutions, no GPU, no mixed precision.

pub mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use graph::{Graph, LossKind, LossTarget, NodeId, OpKind};
pub use rng::SeededRng;
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("tensor shape {shape:?} does not match data length {len}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("expected a scalar, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },

    #[error("bce prediction {value} outside (0, 1); apply a sigmoid first")]
    InvalidProbability { value: f64 },

    #[error("loss target {value} outside [0, 1]")]
    InvalidTarget { value: f64 },

    #[error("class index {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },

    #[error("concat requires at least one input")]
    EmptyConcat,

    #[error("column slice [{start}, {start}+{len}) out of range for {cols} columns")]
    SliceOutOfRange {
        start: usize,
        len: usize,
        cols: usize,
    },

    #[error("wrong number of inputs for {op}: got {got}")]
    Arity { op: &'static str, got: usize },
}
