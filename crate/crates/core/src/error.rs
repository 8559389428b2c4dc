use std::path::PathBuf;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path} line {line}: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("empty corpus after filtering")]
    EmptyCorpus,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("catalog too small: user {user_id} has {available} eligible negatives, {required} required")]
    CatalogTooSmall {
        user_id: String,
        available: usize,
        required: usize,
    },
    #[error("summary parse error: no {missing} section in {raw:?}")]
    SummaryParse { missing: &'static str, raw: String },
    #[error("mixed encoder versions in index: {0} and {1}")]
    MixedEncoderVersions(String, String),
    #[error("missing artifact {path} for stage {stage}; run `{upstream}` first")]
    MissingArtifact {
        stage: String,
        path: PathBuf,
        upstream: String,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
