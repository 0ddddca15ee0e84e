use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("sample index {index} out of range for dataset of {n} samples")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("step {t} is beyond the schedule length {total}")]
    StepOutOfRange { t: u64, total: u64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("flip requested for a sample without image shape")]
    FlipOnNonImage,

    #[error("malformed IDX file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("malformed dataset container: {0}")]
    Container(String),

    #[error("missing checkpoint at step {0}")]
    MissingCheckpoint(u64),

    #[error("corrupt log: {0}")]
    CorruptLog(String),

    #[error("unsupported log format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("degenerate subspace basis")]
    DegenerateBasis,

    #[error("bound premises violated: {0}")]
    PremiseViolated(String),

    #[error("missing forged entry for group {group} at step {t}")]
    MissingEntry { group: usize, t: u64 },

    #[error("attack is not calibrated: {0}")]
    Uncalibrated(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
