use std::path::PathBuf;

use crate::lattice::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },

    #[error("length mismatch: shape {shape} needs {expected} values, got {found}")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        found: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported oracle: {0}")]
    UnsupportedOracle(String),

    #[error("expert {index} ({name}) failed: {source}")]
    Expert {
        index: usize,
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite score for particle {particle}")]
    NonFiniteScore { particle: usize },

    #[error("sampler diverged at t={t}, particle {particle}")]
    Diverged { t: usize, particle: usize },

    #[error("inversion diverged at step {step}")]
    InversionDiverged { step: usize },

    #[error("context conditionals missing for t={t}")]
    MissingContext { t: usize },

    #[error("segment {segment} failed: {source}")]
    Segment {
        segment: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("transport error (retriable): {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("not a run directory: {}", .0.display())]
    NotARun(PathBuf),

    #[error("tensor file: {0}")]
    TensorFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Broad classification used for exit codes and C status codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Runtime,
    Protocol,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::NotARun(_) => ErrorClass::Usage,
            Error::Diverged { .. }
            | Error::InversionDiverged { .. }
            | Error::NonFiniteScore { .. }
            | Error::Domain(_) => ErrorClass::Runtime,
            Error::Transport(_) | Error::Protocol(_) | Error::Backend(_) => ErrorClass::Protocol,
            Error::Expert { source, .. } | Error::Segment { source, .. } => source.class(),
            _ => ErrorClass::Other,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } => "shape_mismatch",
            Error::Domain(_) => "domain",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnsupportedOracle(_) => "unsupported_oracle",
            Error::Expert { .. } => "expert",
            Error::NonFiniteScore { .. } => "non_finite_score",
            Error::Diverged { .. } => "diverged",
            Error::InversionDiverged { .. } => "inversion_diverged",
            Error::MissingContext { .. } => "missing_context",
            Error::Segment { .. } => "segment",
            Error::Transport(_) => "transport",
            Error::Protocol(_) => "protocol",
            Error::Backend(_) => "backend",
            Error::Config(_) => "config",
            Error::NotARun(_) => "not_a_run",
            Error::TensorFormat(_) => "tensor_format",
            Error::Io(_) => "io",
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
