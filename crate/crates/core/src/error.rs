use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the attribution pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: unknown label `{label}`")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("invalid artifact spec: {0}")]
    InvalidArtifactSpec(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("damped Hessian is not positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training data is perfectly separable; use an L2 penalty > 0")]
    Separable,

    #[error("instance `{0}` has no second segment")]
    Unpaired(String),

    #[error("report parameter mismatch: {0}")]
    ParameterMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCorpus => "empty_corpus",
            Error::MalformedLine { .. } => "malformed_line",
            Error::UnknownLabel { .. } => "unknown_label",
            Error::Io { .. } => "io",
            Error::InvalidFractions(_) => "invalid_fractions",
            Error::InvalidArtifactSpec(_) => "invalid_artifact_spec",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Diverged { .. } => "diverged",
            Error::NonFinite(_) => "non_finite",
            Error::NotPositiveDefinite => "not_positive_definite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Separable => "separable",
            Error::Unpaired(_) => "unpaired",
            Error::ParameterMismatch(_) => "parameter_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
        }
    }
}
