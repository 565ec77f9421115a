use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RegError>;

#[derive(Debug, Error)]
pub enum RegError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("volume too small: {0}")]
    TooSmall(String),
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("invalid data: {0}")]
    BadData(String),
    #[error("volume is constant; intensity range is undefined")]
    ConstantVolume,
    #[error("window must be odd and >= 3, got {0}")]
    BadWindow(usize),
    #[error("non-finite loss term: {0}")]
    NonFinite(String),
    #[error("loss diverged to a non-finite value at level {level}, iteration {iter}")]
    NonFiniteLoss { level: usize, iter: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("knot abscissae must be strictly increasing with at least two knots")]
    BadKnots,
    #[error("a curve needs at least 3 knots, got {0}")]
    BadKnotCount(usize),
    #[error("{0} lies outside the curve domain [0, 255]")]
    OutOfDomain(f64),
    #[error("intensity {0} outside [-0.5, 255.5]; normalize the volume first")]
    OutOfRange(f64),
    #[error("reference histogram must hold 256 non-negative masses summing to 1")]
    BadHistogram,
    #[error("{rejected} consecutive candidates rejected after {accepted} accepted LUTs")]
    RejectionOverflow { accepted: usize, rejected: usize },

    #[error("label {0} is empty in at least one map")]
    EmptyLabel(u32),
    #[error("landmark lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("landmark {index} at {point:?} lies outside the grid extent")]
    OutOfExtent { index: usize, point: [f64; 3] },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported orientation: {0}")]
    UnsupportedOrientation(String),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RegError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RegError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        RegError::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
