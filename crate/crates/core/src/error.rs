use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?} ({context})")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
        context: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),

    #[error("training diverged at timestep {timestep}, epoch {epoch}: loss = {loss}")]
    Diverged {
        timestep: usize,
        epoch: usize,
        loss: f64,
    },

    #[error("explicit scheme unstable with {n_steps} steps; need at least {min_steps}")]
    Unstable { n_steps: usize, min_steps: usize },

    #[error("grid padding {actual} is too small; need at least {required}")]
    InsufficientPadding { required: f64, actual: f64 },

    #[error("{path}:{line}: {reason}")]
    Csv {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("dataset has no labels but `{0}` requires them")]
    MissingLabels(&'static str),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {left} vs {right} ({context})")]
    LengthMismatch {
        left: usize,
        right: usize,
        context: &'static str,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the numerics (divergence, instability)
    /// rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::Unstable { .. } | Error::NonFinite(_)
        ) || matches!(self, Error::Autodiff(AutodiffError::NonFinite { .. }))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
