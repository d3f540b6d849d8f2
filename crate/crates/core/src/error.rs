use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("mixed recording ids: {0} vs {1}")]
    MixedRecordings(String, String),

    #[error("k = {k} exceeds the number of distinct points ({points})")]
    TooManyClusters { k: usize, points: usize },

    #[error("{n} points exceed the agglomerative clustering cap of {cap}")]
    SizeCap { n: usize, cap: usize },

    #[error("no dense region: every point is an outlier")]
    NoDenseRegion,

    #[error("recording {recording} has {frames} frames, fewer than the minimum unit duration {min_dur}")]
    TooShort {
        recording: String,
        frames: usize,
        min_dur: usize,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }
}
