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

    /// The binary payload does not follow the split file layout.
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Manifest and payload disagree, or the manifest itself is malformed.
    #[error("schema error: {0}")]
    Schema(String),

    /// A record carries values the pipeline cannot accept.
    #[error("data error in record {record}: {reason}")]
    Data { record: usize, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient capacity: {0}")]
    Capacity(String),

    #[error("support sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("task {task} (seed {seed}): {source}")]
    Task {
        task: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips sample/task annotations and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Sample { source, .. } | Error::Task { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable tag for the root cause.
    pub fn code(&self) -> &'static str {
        match self.root() {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Schema(_) => "schema",
            Error::Data { .. } => "data",
            Error::Degenerate(_) => "degenerate_input",
            Error::Domain(_) => "domain",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Precondition(_) => "precondition",
            Error::Capacity(_) => "capacity",
            Error::Sample { .. } | Error::Task { .. } => unreachable!("root() strips wrappers"),
        }
    }

    /// True for errors caused by malformed inputs or configuration rather
    /// than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::Format { .. } | Error::Schema(_) | Error::Data { .. } | Error::InvalidConfig(_)
        )
    }
}
