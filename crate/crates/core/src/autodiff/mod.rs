//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters enter as
//! [`Tape::param`] leaves; after [`Tape::backward`] their gradients are read
//! back with [`Tape::grad`].

mod params;
mod tape;
mod tensor;

pub use params::{check_layout, flatten_params, unflatten_params, ParamLayout, ParamVector};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for extent {bound}")]
    Index { index: usize, bound: usize },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

#[cfg(test)]
mod tests;
