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

    /// Malformed file layout (missing property, bad magic, truncated payload).
    #[error("format error: {0}")]
    Format(String),

    /// A value violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// The scene lacks the semantic payload an operation needs.
    #[error("mode error: {0}")]
    Mode(String),

    #[error("insufficient evidence: {0}")]
    EmptyEvidence(String),

    #[error("no instance found: {0}")]
    NoInstance(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// A pipeline stage failed; `source` carries the underlying error.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Innermost error behind any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable kind of the root error.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Validation(_) => "validation",
            Error::Mode(_) => "mode",
            Error::EmptyEvidence(_) => "insufficient_evidence",
            Error::NoInstance(_) => "no_instance",
            Error::Transport(_) => "transport",
            Error::Budget(_) => "budget",
            Error::Parse { .. } => "parse",
            Error::Json(_) => "json",
            Error::Stage { .. } => unreachable!("root never returns a stage wrapper"),
        }
    }

    /// Pipeline stage that failed, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
