use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load image {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("patch of radius {radius} centered at ({x}, {y}) leaves a {width}x{height} map")]
    Bounds {
        x: usize,
        y: usize,
        radius: usize,
        width: usize,
        height: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("patch constraint violated: {0}")]
    Constraint(String),

    #[error("cannot fit distribution: {0}")]
    Fit(String),

    #[error("invalid integration bounds [{k0}, {k1}]")]
    InvalidBounds { k0: f64, k1: f64 },

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by input data rather than by a computation.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Load { .. } | Error::Manifest { .. } | Error::Io(_))
    }
}
