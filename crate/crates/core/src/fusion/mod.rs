//! Learned gated fusion of text and user representations.
//!
//! `oracle` is a dependency-free `f64` implementation with an analytic
//! backward pass; `layer` and `dual` are the trainable tensor versions.

pub mod oracle;

#[cfg(feature = "nn")]
pub mod dual;
#[cfg(feature = "nn")]
pub mod layer;

#[cfg(feature = "nn")]
pub use dual::{DualConfig, DualEncoderModel, DualInput};
#[cfg(feature = "nn")]
pub use layer::{FusionConfig, GatedFusion};
pub use oracle::{FusionGradients, FusionState, GatedFusionParams};

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("fusion parameter shape: {0}")]
    Shape(String),
    #[error("fusion parameters contain non-finite values")]
    NonFinite,
    #[error("expected vectors of dimension {expected}, got text {text} and user {user}")]
    DimensionMismatch {
        expected: usize,
        text: usize,
        user: usize,
    },
    #[cfg(feature = "nn")]
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[cfg(feature = "nn")]
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("{path}: {message}")]
    Checkpoint {
        path: std::path::PathBuf,
        message: String,
    },
}
