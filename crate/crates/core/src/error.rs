use std::io;

use thiserror::Error;

pub type Result<T, E = ShimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ShimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// The normal matrix of the least-squares step is numerically singular.
    #[error("rank-deficient normal matrix (pivot {pivot:e} at column {column})")]
    RankDeficient { column: usize, pivot: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("could not generate {requested} {class} samples within {attempts} attempts (got {produced})")]
    GenerationShortfall {
        class: &'static str,
        requested: usize,
        produced: usize,
        attempts: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ShimError {
    /// Damaged file content, as opposed to a wrong file kind or version.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            ShimError::Truncated(_) | ShimError::Checksum { .. } | ShimError::Corrupt(_)
        )
    }

    /// Stable short code, used in CSV failure rows and CLI messages.
    pub fn code(&self) -> &'static str {
        match self {
            ShimError::InvalidArgument(_) => "invalid-argument",
            ShimError::InvalidGeometry(_) => "invalid-geometry",
            ShimError::RankDeficient { .. } => "rank-deficient",
            ShimError::NonFinite(_) => "non-finite",
            ShimError::GenerationShortfall { .. } => "generation-shortfall",
            ShimError::Format(_) => "format",
            ShimError::Version { .. } => "version",
            ShimError::Truncated(_) => "truncated",
            ShimError::Checksum { .. } => "checksum",
            ShimError::Corrupt(_) => "corrupt",
            ShimError::Io(_) => "io",
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ShimError::InvalidArgument(msg.into()))
}
