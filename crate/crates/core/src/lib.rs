//! Task-aware spatial disentanglement (TSD) detection head with progressive
//! constraint, built on a self-contained reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dynamic-graph autodiff over flat `Vec<Real>` tensors, plus a
//!   finite-difference gradient verifier.
//! - [`geometry`] — box arithmetic: IoU, regression-delta coding, clipping, NMS.
//! - [`roi`] — differentiable RoIAlign, proposal translation and pointwise
//!   deformable pooling.
//! - [`heads`] — the classical sibling head and the TSD head with its
//!   proposal estimators.
//! - [`losses`] — label assignment, classification/localization losses and the
//!   progressive-constraint margins.
//! - [`synth`] — synthetic shapes corpus generator and proposal jitterer.
//! - [`backbone`] — tiny convolutional stack producing a single stride-8
//!   feature map.
//! - [`model`], [`train`], [`eval`] — detector assembly, SGD training loop and
//!   mAP evaluation across IoU thresholds.
//! - [`probe`] — spatial-sensitivity scan contrasting classification and
//!   localization responses to proposal translation.

pub mod backbone;
pub mod checkpoint;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod losses;
pub mod model;
pub mod ppm;
pub mod probe;
pub mod roi;
pub mod synth;
pub mod tensor;
pub mod train;

/// Scalar type used throughout: `f32` by default, `f64` with the `f64`
/// feature for tighter gradient checks.
#[cfg(feature = "f64")]
pub type Real = f64;
#[cfg(not(feature = "f64"))]
pub type Real = f32;

/// Relative tolerance for gradient checks in the active scalar mode.
#[cfg(feature = "f64")]
pub const GRAD_CHECK_TOL: Real = 1e-5;
#[cfg(not(feature = "f64"))]
pub const GRAD_CHECK_TOL: Real = 1e-3;

/// Central-difference step matched to the active scalar precision.
#[cfg(feature = "f64")]
pub const GRAD_CHECK_EPS: Real = 1e-5;
#[cfg(not(feature = "f64"))]
pub const GRAD_CHECK_EPS: Real = 5e-3;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("degenerate box in {op}: {detail}")]
    DegenerateBox { op: &'static str, detail: String },

    #[error("non-finite gradient for parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },

    #[error("non-finite loss at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: usize, epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateBox { op, detail: detail.into() }
    }
}
