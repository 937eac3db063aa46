//! Tensors, a small reverse-mode tape, finite-difference gradient checks and
//! the AdamW optimiser.
//!
//! Broadcasting is limited to scalar-times-tensor and per-channel vectors
//! (`add_bias` / `mul_vec`); everything else requires explicit reshapes.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use graph::{Axis, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("loss must be a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
