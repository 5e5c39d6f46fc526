use std::path::PathBuf;

use thiserror::Error;

use crate::data::Modality;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing {0} volume")]
    MissingModality(Modality),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label value {0} outside the expected domain")]
    LabelDomain(i64),
    #[error("brain mask of {0} volume is empty")]
    EmptyBrainMask(Modality),
    #[error("crop {crop:?} does not fit volume {dims:?}")]
    CropTooLarge { crop: [usize; 3], dims: [usize; 3] },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("expected {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("level {0} is not valid here")]
    Level(usize),
    #[error("prediction is not a probability distribution (column sum {0})")]
    Normalization(f64),
    #[error("{0} out of range")]
    Range(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint config fingerprint {found} does not match {expected}")]
    ConfigMismatch { found: String, expected: String },
    #[error("corrupted checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("case {case}: {source}")]
    Case {
        case: String,
        #[source]
        source: Box<Error>,
    },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn with_case(self, case: impl Into<String>) -> Self {
        Error::Case {
            case: case.into(),
            source: Box::new(self),
        }
    }

    /// Stable, greppable identifier printed in front of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingModality(_) => "E_MISSING_MODALITY",
            Error::ShapeMismatch(_) => "E_SHAPE",
            Error::LabelDomain(_) => "E_LABEL_DOMAIN",
            Error::EmptyBrainMask(_) => "E_EMPTY_BRAIN_MASK",
            Error::CropTooLarge { .. } => "E_CROP_TOO_LARGE",
            Error::InvalidSpec(_) => "E_INVALID_SPEC",
            Error::Config(_) => "E_CONFIG",
            Error::Arity { .. } => "E_ARITY",
            Error::Level(_) => "E_LEVEL",
            Error::Normalization(_) => "E_NORMALIZATION",
            Error::Range(_) => "E_RANGE",
            Error::NonFiniteLoss(_) => "E_NON_FINITE_LOSS",
            Error::CheckpointVersion { .. } => "E_CHECKPOINT_VERSION",
            Error::ConfigMismatch { .. } => "E_CONFIG_MISMATCH",
            Error::CorruptCheckpoint(_) => "E_CORRUPT_CHECKPOINT",
            Error::Format { .. } => "E_FORMAT",
            Error::Case { source, .. } => source.code(),
            Error::Verification(_) => "E_VERIFY",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    /// Process exit code: 2 for data problems, 3 for failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 3,
            Error::Config(_) | Error::Range(_) => 1,
            Error::Case { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
