//! Error type shared by every module of the toolkit.

use std::fmt;
use std::io;
use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// I/O failure, carrying the path involved.
    Io { path: PathBuf, source: io::Error },
    /// Malformed text file (ENVI header, config, CSV).
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// A header names an interleave, data type, or option outside the supported set.
    Unsupported { what: String },
    /// Data file shorter than the header implies.
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    /// Tensor/cube shapes do not conform for the requested operation.
    Shape { expected: String, actual: String },
    /// A band with zero variance where a nonzero spread is required.
    DegenerateBand { band: usize },
    /// Requested patch side exceeds the image extent.
    PatchTooLarge {
        m: usize,
        height: usize,
        width: usize,
    },
    /// Anomaly blob placement failed after bounded retries.
    Placement { attempts: usize },
    /// Scene or architecture configuration violates an invariant.
    InvalidConfig { message: String },
    /// Normalization over fewer than two elements per channel.
    DegenerateBatch { channel_elements: usize },
    /// A covariance stayed non positive definite after regularization.
    Conditioning { smallest_eigenvalue: f64 },
    /// backward() was invoked on a graph whose operations were released.
    GraphFreed,
    /// API misuse, e.g. an optimizer step with unpopulated gradients.
    Misuse { message: String },
    /// Evaluation mask containing a single class.
    DegenerateMask { positives: usize, negatives: usize },
    /// Training over an empty patch set.
    EmptyTrainingSet,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "i/o error on {}: {}", path.display(), source),
            Error::Format { path, line, message } => {
                write!(f, "format error in {} line {}: {}", path.display(), line, message)
            }
            Error::Unsupported { what } => write!(f, "unsupported: {}", what),
            Error::Truncated { path, expected, actual } => write!(
                f,
                "data file {} too short: expected {} bytes, found {}",
                path.display(),
                expected,
                actual
            ),
            Error::Shape { expected, actual } => {
                write!(f, "shape mismatch: expected {}, got {}", expected, actual)
            }
            Error::DegenerateBand { band } => {
                write!(f, "band {} has zero standard deviation", band)
            }
            Error::PatchTooLarge { m, height, width } => write!(
                f,
                "patch side {} exceeds image extent {}x{}",
                m, height, width
            ),
            Error::Placement { attempts } => write!(
                f,
                "anomaly placement failed after {} attempts; reduce anomaly_count or anomaly_radius",
                attempts
            ),
            Error::InvalidConfig { message } => write!(f, "invalid configuration: {}", message),
            Error::DegenerateBatch { channel_elements } => write!(
                f,
                "batch normalization needs at least 2 elements per channel, got {}",
                channel_elements
            ),
            Error::Conditioning { smallest_eigenvalue } => write!(
                f,
                "covariance not positive definite after regularization (smallest eigenvalue {:e})",
                smallest_eigenvalue
            ),
            Error::GraphFreed => write!(f, "backward() on a freed graph"),
            Error::Misuse { message } => write!(f, "misuse: {}", message),
            Error::DegenerateMask { positives, negatives } => write!(
                f,
                "mask must contain both classes: {} positive, {} negative",
                positives, negatives
            ),
            Error::EmptyTrainingSet => write!(f, "patch grid produced no training patches"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
