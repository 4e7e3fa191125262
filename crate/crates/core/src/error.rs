use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("variant mismatch: {0}")]
    Variant(String),

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(
        "pretrained backbone weights unavailable at {path}; \
         use the trained-small-encoder texture extractor instead"
    )]
    PretrainedUnavailable { path: PathBuf },

    #[error("model not trained: {0}")]
    Untrained(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by the input data rather than by the program.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::Decode { .. }
            | Error::Data(_)
            | Error::Dimension(_)
            | Error::Variant(_)
            | Error::DuplicateId(_)
            | Error::Format(_)
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Checksum(_)
            | Error::PretrainedUnavailable { .. } => true,
            Error::Stage { source, .. } => source.is_data_error(),
            _ => false,
        }
    }

    /// True for malformed arguments or configuration.
    pub fn is_usage_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => true,
            Error::Stage { source, .. } => source.is_usage_error(),
            _ => false,
        }
    }
}
