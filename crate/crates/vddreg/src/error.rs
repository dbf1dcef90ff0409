//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the registration pipeline and its supporting stages.
#[derive(Debug, thiserror::Error)]
pub enum VddError {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A domain invariant was violated (value range, point bounds, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Array/image dimensions do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A minimal sample (or normal system) is degenerate and cannot be fit.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// RANSAC could not produce a model with enough inliers.
    #[error("registration failure: {0}")]
    RegistrationFailure(String),

    /// A training-stage precondition failed or training diverged.
    #[error("training error: {0}")]
    Training(String),

    /// A backbone tap requested by the configuration does not exist.
    #[error("missing backbone tap '{0}'")]
    MissingTap(String),

    /// Weights file missing or structurally invalid.
    #[error("weights error: {0}")]
    Weights(String),

    /// A required file or directory is absent.
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    /// Malformed text data (correspondence files, manifests, ...).
    #[error("parse error in {path}, line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Image decode/encode failure.
    #[error("image error: {0}")]
    Image(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A pipeline stage failed; carries the stage name for diagnostics.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<VddError>,
    },
}

impl VddError {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        VddError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the error (possibly wrapped in a stage) is a registration failure.
    pub fn is_registration_failure(&self) -> bool {
        match self {
            VddError::RegistrationFailure(_) => true,
            VddError::Stage { source, .. } => source.is_registration_failure(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, VddError>;
