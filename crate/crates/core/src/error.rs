use thiserror::Error;

use crate::io::config::ConfigError;
use crate::io::ppm::ImageError;
use crate::training::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{op}: empty reduction domain")]
    EmptyReduction { op: &'static str },

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for trainable tensor `{0}`")]
    MissingGradient(String),

    #[error("training diverged at iteration {iteration} (t={t}, mode={mode}): loss is not finite")]
    Diverged {
        iteration: u64,
        t: usize,
        mode: &'static str,
    },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Image(#[from] ImageError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
