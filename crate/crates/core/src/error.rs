use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("rank {rank} outside 1..={max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("inverse transform left an imaginary residual of {residual:e} (limit {limit:e})")]
    SymmetryViolation { residual: f64, limit: f64 },
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("top-k selection keeps no channel (ratio {ratio}, channels {channels})")]
    EmptySelection { ratio: f64, channels: usize },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("SSIM window {window} larger than image {rows}x{cols}")]
    WindowTooLarge { window: usize, rows: usize, cols: usize },
    #[error("every spectrum is zero in at least one input")]
    AllSpectraZero,
    #[error("training data shape mismatch: {0}")]
    DataShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
