use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no foreground support")]
    NoForeground,

    #[error("no background support")]
    NoBackground,

    #[error("feature file: {0}")]
    Features(#[from] FeatureFileError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("pgm: {0}")]
    Pgm(String),

    #[error("config: {0}")]
    Config(String),

    #[error("empty episode pool: no slice in the filtered pool contains class {class}")]
    EmptyPool { class: u8 },

    #[error("non-finite loss at step {step} (last good checkpoint: {last_checkpoint:?})")]
    NonFiniteLoss {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failure modes of the DSPF feature-file reader, one per distinct cause.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureFileError {
    #[error("bad magic {0:?}, expected \"DSPF\"")]
    BadMagic([u8; 4]),
    #[error("truncated: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid header extents {0:?}")]
    BadExtents([u32; 3]),
}

impl FeatureFileError {
    /// Stable numeric code, also used as the CLI exit status.
    pub fn code(&self) -> i32 {
        match self {
            FeatureFileError::BadMagic(_) => 10,
            FeatureFileError::Truncated { .. } => 11,
            FeatureFileError::NonFinite(_) => 12,
            FeatureFileError::BadExtents(_) => 13,
        }
    }
}
