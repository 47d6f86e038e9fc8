use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("non-finite evaluation: {0}")]
    NonFinite(String),

    #[error("non-finite gradient component at index {index} ({value})")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate divergence: bound denominator {denominator:e} is numerically zero")]
    DegenerateDivergence { denominator: f64 },

    #[error(
        "tempering stalled at beta = {beta}: step factor {factor:e} underflowed; \
         train longer at this temperature"
    )]
    TemperingStall { beta: f64, factor: f64 },

    #[error("quadrature grid too small: {boundary} boundary density ratio {ratio:e} exceeds 1e-12")]
    GridTooSmall { boundary: String, ratio: f64 },

    #[error("run aborted at stage {stage} (beta = {beta}): {reason}")]
    RunAborted {
        stage: usize,
        beta: f64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
