use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] artiscope::Error),

    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("snapshot hash mismatch: expected {expected}, checkpoint has {found}")]
    SnapshotMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no instance with id `{0}`")]
    UnknownInstance(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::SnapshotMismatch { .. } => "snapshot_mismatch",
            CliError::Io { .. } => "io",
            CliError::UnknownInstance(_) => "unknown_instance",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One-line JSON diagnostic for standard error.
    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}
