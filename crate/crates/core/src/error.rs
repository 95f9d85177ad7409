use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("matrix is numerically rank deficient at column {column} (|R| = {magnitude:e})")]
    RankDeficient { column: usize, magnitude: f64 },

    #[error("matrix is not symmetric: max asymmetry {max_asymmetry:e}")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("activations are zero, no principal directions to initialize from")]
    ZeroActivations,

    #[error("layer {0}: forward called twice without a backward pass")]
    PendingCache(String),

    #[error("layer {0}: backward called without a cached forward pass")]
    MissingCache(String),

    #[error("layer {0}: optimizer step called without a gradient")]
    MissingGradient(String),

    #[error("optimizer step counter overflow")]
    StepOverflow,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
}
