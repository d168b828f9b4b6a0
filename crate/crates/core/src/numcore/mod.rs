//! Dense `f64` tensors, a reverse-mode tape, and finite-difference checks.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, finite_diff_check, GradCheckReport};
pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{batch_covariance, frobenius_norm, normalize_frobenius, softmax_temperature, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate batch: need at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("numeric guard: {0}")]
    NumericGuard(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}
