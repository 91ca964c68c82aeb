use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("polyline has no non-degenerate segment")]
    DegeneratePolyline,

    #[error("polyline needs at least 2 points, got {0}")]
    PolylineTooShort(usize),

    #[error("zero-length vector in angular difference")]
    ZeroVector,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("backward requires a 1x1 loss node, got {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("horizon {horizon_s}s exceeds plan length ({ticks} ticks of {dt}s)")]
    HorizonExceeded {
        horizon_s: f64,
        ticks: usize,
        dt: f64,
    },

    #[error("horizon exhausted at tick {0}")]
    HorizonExhausted(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: schema version {found} not supported (expected {expected})")]
    SchemaVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what} is not finite")]
    Divergence {
        epoch: usize,
        step: usize,
        what: &'static str,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse { .. } | Error::SchemaVersion { .. } => "parse",
            Error::CheckpointMismatch(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "missing-file"
            }
            Error::Io { .. } => "io",
            _ => "compute",
        }
    }
}
