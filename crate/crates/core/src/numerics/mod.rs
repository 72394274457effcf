//! Dense tensors, reverse-mode differentiation, symmetric linear algebra
//! and seeded random streams.

mod autodiff;
pub mod linalg;
mod rng;
mod tensor;

use thiserror::Error;

pub use autodiff::{grad, Gradients, Tape, Var};
pub use linalg::spd_sqrt;
pub use rng::{sample_standard_normal, RngStream};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("gradient requested for non-scalar output of shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("operation `{0}` has no derivative rule")]
    UnsupportedPrimitive(&'static str),
    #[error("matrix of shape {shape:?} is not square")]
    NotSquare { shape: Vec<usize> },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is indefinite (eigenvalue {min_eigenvalue:e})")]
    IndefiniteMatrix { min_eigenvalue: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}
