use thiserror::Error;

use crate::skeleton::Frame;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate frame mismatch: expected {expected:?}, found {found:?}")]
    FrameMismatch { expected: Frame, found: Frame },

    #[error("point is behind the camera (z = {z} mm)")]
    BehindCamera { z: f64 },

    #[error("pixel ({u}, {v}) lies outside the {width}x{height} grid")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("plausibility scorer returned {value}, outside the open interval (0, 1)")]
    ScorerContract { value: f64 },

    #[error("value {value} outside the domain of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("insufficient history: need {needed} samples, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("observations misaligned with the sequence: {0}")]
    MisalignedObservations(String),

    #[error("non-finite gradient at iteration {iteration} (stage {stage})")]
    NonFiniteGradient { iteration: usize, stage: usize },

    #[error("frame misalignment: {0}")]
    FrameMisalignment(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema violation at `{path}`: {message}")]
    Schema {
        line: usize,
        path: String,
        message: String,
    },

    #[error("invalid heatmap file: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numeric core, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::Degenerate(_) | Error::BehindCamera { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
