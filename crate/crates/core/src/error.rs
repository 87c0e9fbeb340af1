use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants group into the four failure classes the CLI maps to exit
/// codes: configuration, data, numerical divergence, and internal contract
/// violations.
#[derive(Debug, Error)]
pub enum CmusError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },

    #[error("shape mismatch in {path}: expected {expected} values, found {found}")]
    ShapeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {path} at element {index}")]
    NonFinite { path: PathBuf, index: usize },

    #[error("missing tensor file {0}")]
    MissingFile(PathBuf),

    #[error("stratification failed: {0}")]
    Stratification(String),
}

impl CmusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CmusError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class: 1 config, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmusError::Config(_)
            | CmusError::Dimension(_)
            | CmusError::Contract(_)
            | CmusError::InvalidValue(_) => 1,
            CmusError::Io { .. }
            | CmusError::MalformedManifest { .. }
            | CmusError::ShapeMismatch { .. }
            | CmusError::NonFinite { .. }
            | CmusError::MissingFile(_)
            | CmusError::Stratification(_) => 2,
            CmusError::Divergence(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CmusError>;
