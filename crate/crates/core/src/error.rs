use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("class {class} has no examples")]
    EmptyClass { class: usize },

    #[error("class {class} has {available} examples, {needed} required")]
    InsufficientExamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("pair sampling needs at least 2 classes with 2 examples each: {0}")]
    InsufficientClassSize(String),

    #[error("model does not support {0}")]
    UnsupportedCapability(&'static str),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic bytes, not an OODF file")]
    BadMagic,

    #[error("unsupported OODF version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum failure (stored {stored:016x}, computed {computed:016x})")]
    ChecksumFailure { stored: u64, computed: u64 },

    #[error("inconsistent header: {0}")]
    InconsistentHeader(String),

    #[error("feature set '{0}' has no labels")]
    MissingLabels(String),

    #[error("feature set '{0}' has no logits")]
    MissingLogits(String),

    #[error("no preprocessed variant for {method} T={temperature} eps={epsilon} on '{dataset}'")]
    MissingPreprocessedVariant {
        dataset: String,
        method: String,
        temperature: f64,
        epsilon: f64,
    },

    #[error("incomplete grid, missing cells: {}", .missing.join(", "))]
    IncompleteGrid { missing: Vec<String> },

    #[error("duplicate report row: {0}")]
    DuplicateRow(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a report: {source}")]
    BadReport {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 3 IO, 4 file format, 5 data,
    /// 6 report grid, 7 numerics, 2 bad arguments.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::BadMagic
            | Error::VersionMismatch { .. }
            | Error::ChecksumFailure { .. }
            | Error::InconsistentHeader(_)
            | Error::BadReport { .. }
            | Error::Json(_) => 4,
            Error::DimensionMismatch { .. }
            | Error::EmptyClass { .. }
            | Error::InsufficientExamples { .. }
            | Error::InsufficientClassSize(_)
            | Error::MissingLabels(_)
            | Error::MissingLogits(_)
            | Error::MissingPreprocessedVariant { .. }
            | Error::UnsupportedCapability(_) => 5,
            Error::IncompleteGrid { .. } | Error::DuplicateRow(_) => 6,
            Error::NotPositiveDefinite { .. } | Error::NotSymmetric { .. } | Error::NonFinite(_) => 7,
            Error::InvalidArgument(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
