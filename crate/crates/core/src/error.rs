use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("rotation angle {angle} is outside the injectivity radius (must be < pi)")]
    InjectivityRadius { angle: f64 },

    #[error("interpolation fraction {0} is outside [0, 1]")]
    FractionOutOfRange(f64),

    #[error("timestamp {t} is outside trajectory range [{first}, {last}]")]
    TimeOutOfRange { t: f64, first: f64, last: f64 },

    #[error("trajectory needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("render buffers are stale: scene or view changed since the forward pass")]
    StaleBuffers,

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: String, iteration: usize },

    #[error("linear solve failed: {0}")]
    Numeric(String),

    #[error("unknown world spec `{0}`")]
    UnknownWorld(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
