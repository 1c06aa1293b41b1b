//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Each op checks
//! its output for NaN/Inf and fails with the op's name, so numerical blowups
//! surface at the operation that produced them.

mod check;
mod element;
mod graph;
mod tensor;

use thiserror::Error;

pub use check::{finite_diff_grad, finite_diff_grad_at, max_relative_error};
pub use element::Element;
pub use graph::{BatchStats, Conv2dGeom, Gradients, Graph, Mode, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AutodiffError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        AutodiffError::Invalid { op, detail: detail.into() }
    }
}
