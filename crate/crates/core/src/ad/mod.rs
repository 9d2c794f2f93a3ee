//! Reverse-mode automatic differentiation over dense `f64` matrices.

mod fd;
pub mod linalg;
mod ops;
mod param;
mod tape;
mod tensor;

pub use fd::{finite_diff_grad, grad_error};
pub use param::{Param, ParamSet, Transform};
pub use tape::{Gradients, Side, Tape, Var};
pub use tensor::{Shape, Tensor};

pub(crate) use tape::softplus;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("cholesky failed at pivot {pivot} after jitter escalation")]
    Decomposition { pivot: usize },
    #[error("singular triangular factor: zero diagonal at {index}")]
    Singular { index: usize },
    #[error("domain error in {op}: argument {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("{0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;
