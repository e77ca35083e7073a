//! Error taxonomy shared across the toolkit.
//!
//! Variants are grouped so a caller (notably the CLI) can map them onto a
//! small set of outcomes: bad input data, embedding-provider trouble,
//! numerical blow-ups, and artifact/schema mismatches.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on arguments or configuration does not hold.
    #[error("validation error: {0}")]
    Validation(String),

    /// Dataset contents are malformed (missing pairs, bad label values, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A dataset or scan input contained no usable samples.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Text-embedding provider failure. `class` names the offending input
    /// when the provider reports per-input granularity; `retryable` hints
    /// that the same call may succeed later (e.g. a transient subprocess
    /// failure).
    #[error("provider error{}: {message}", class.as_deref().map(|c| format!(" for class '{c}'")).unwrap_or_default())]
    Provider {
        message: String,
        class: Option<String>,
        retryable: bool,
    },

    /// A serialized artifact declares an unsupported schema version.
    #[error("schema version mismatch in {path}: found {found}, expected {expected}")]
    SchemaVersion {
        path: String,
        found: u32,
        expected: u32,
    },

    /// Stored checksum does not match recomputed contents.
    #[error("checksum mismatch in {0}")]
    Checksum(String),

    /// File ended before the declared payload was read.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// An input artifact was produced under an incompatible configuration.
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    /// A non-finite value surfaced where finite math was required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error onto.
    ///
    /// 2 = data problems, 3 = provider problems, 4 = numerical aborts,
    /// 5 = artifact/schema mismatches.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Data(_) | Error::EmptyDataset(_) | Error::Io { .. } => 2,
            Error::Json { .. } => 2,
            Error::Provider { .. } => 3,
            Error::NonFinite(_) => 4,
            Error::SchemaVersion { .. }
            | Error::Checksum(_)
            | Error::Truncated(_)
            | Error::ArtifactMismatch(_) => 5,
        }
    }
}
