use thiserror::Error;

/// Crate-wide error type.
///
/// Autodiff graphs are append-only, so reference cycles cannot be
/// constructed and need no error variant.
#[derive(Debug, Error)]
pub enum VxError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("no parameter named `{0}`")]
    UnknownParameter(String),

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("volume too small: {0}")]
    VolumeTooSmall(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("crop target exceeds source: {0}")]
    CropTooLarge(String),

    #[error("input too small: {0}")]
    InputTooSmall(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VxError>;
