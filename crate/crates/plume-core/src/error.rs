use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the trace pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },

    #[error("malformed record in {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("invalid trace `{id}`: {reason}")]
    InvalidTrace { id: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset has no informative features")]
    NoInformativeFeatures,

    #[error("k_range exceeds rows: k in [{k_min}, {k_max}] but matrix has {rows} rows")]
    KRangeExceedsRows {
        k_min: usize,
        k_max: usize,
        rows: usize,
    },

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("silhouette undefined: fewer than 2 clusters")]
    SilhouetteUndefined,

    #[error("feature selection failed in round {round}: {source}")]
    Selection {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("invalid action: {0}")]
    InvalidAction(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn invalid_trace(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidTrace {
            id: id.into(),
            reason: reason.into(),
        }
    }
}
