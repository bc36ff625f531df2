//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by dataset construction, regression backends and tests.
#[derive(Debug, Error)]
pub enum GcmError {
    /// Invalid argument or malformed input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A non-finite value (NaN or infinity) was encountered.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Two vectors that must share a length do not.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// Kernel family does not support the requested input.
    #[error("kernel unsupported: {0}")]
    KernelUnsupported(String),

    /// Symmetric eigendecomposition failed.
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    /// The residual-product variance collapsed; the statistic is undefined.
    #[error("degenerate statistic: residual-product variance {tau_d:.3e} below threshold {threshold:.3e}")]
    DegenerateStatistic { tau_d: f64, threshold: f64 },

    /// A pairwise statistic in the multivariate test degenerated.
    #[error("degenerate statistic for pair (x{x_col}, y{y_col})")]
    DegeneratePair { x_col: usize, y_col: usize },

    /// Sample too small to split into two usable halves.
    #[error("sample of size {n} too small to split (need n >= 4)")]
    SplitTooSmall { n: usize },

    /// A grid/digit argument of the hiding construction is out of range.
    #[error("hiding construction: {0}")]
    Hiding(String),
}

impl GcmError {
    /// Statistical degeneracies are reported separately from input errors
    /// so callers (the CLI in particular) can map them to a distinct
    /// exit status.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            GcmError::DegenerateStatistic { .. }
                | GcmError::DegeneratePair { .. }
                | GcmError::SplitTooSmall { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, GcmError>;
