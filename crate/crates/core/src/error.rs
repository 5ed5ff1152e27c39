use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::provider::ProviderError;

/// A single validation problem, addressed by a dotted path into the
/// document or value being checked (e.g. `models[0].temperature`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl Issue {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }

    /// Re-root this issue under `prefix`.
    pub fn under(mut self, prefix: &str) -> Self {
        self.path = if self.path.is_empty() {
            prefix.to_string()
        } else if self.path.starts_with('[') {
            format!("{prefix}{}", self.path)
        } else {
            format!("{prefix}.{}", self.path)
        };
        self
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

pub(crate) fn join_issues(issues: &[Issue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value: {}", join_issues(.0))]
    Invalid(Vec<Issue>),

    #[error("schema error in {source_name} at row {row}: {message}")]
    Schema { source_name: String, row: usize, message: String },

    #[error("duplicate sample ids in {source_name}: {}", .ids.join(", "))]
    DuplicateIds { source_name: String, ids: Vec<String> },

    #[error("integrity error: checksum mismatch for {path} (expected {expected}, got {actual})")]
    Integrity { path: PathBuf, expected: String, actual: String },

    #[error("template error: {0}")]
    Template(#[from] crate::generation::TemplateError),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("analysis input error: {0}")]
    AnalysisInput(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("project not found at {0}")]
    ProjectNotFound(PathBuf),

    #[error("project is locked by another process: {0}")]
    ProjectLocked(PathBuf),

    #[error("project corrupted: {0}")]
    Corrupt(String),

    #[error("download failed for {url}: {message}")]
    Download { url: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by the environment (files, network, locks)
    /// rather than by the user's configuration or data.
    pub fn is_environmental(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Download { .. }
                | Error::ProjectNotFound(_)
                | Error::ProjectLocked(_)
                | Error::Corrupt(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
