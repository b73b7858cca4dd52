use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("manifest entry {subject_id:?}: {message}")]
    Manifest { subject_id: String, message: String },

    #[error("duplicate subject_id {0:?} in manifest")]
    DuplicateSubject(String),

    #[error("volume {subject_id:?}: {message}")]
    InvalidVolume { subject_id: String, message: String },

    #[error("slice index {index} out of range for volume with {depth} slices")]
    SliceOutOfRange { index: usize, depth: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("feature grid {h}x{w} is not divisible by window size {omega}")]
    WindowDivisibility { h: usize, w: usize, omega: usize },

    #[error("sample {0} has an empty positive set")]
    EmptyPositiveSet(usize),

    #[error("global feature {0} has zero norm")]
    ZeroNormFeature(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parameter shape mismatch: {}", .0.join(", "))]
    ParamMismatch(Vec<String>),

    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: u64, diagnostic: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Manifest { .. } => "manifest",
            Error::DuplicateSubject(_) => "duplicate_subject",
            Error::InvalidVolume { .. } => "invalid_volume",
            Error::SliceOutOfRange { .. } => "slice_out_of_range",
            Error::Shape(_) => "shape",
            Error::WindowDivisibility { .. } => "window_divisibility",
            Error::EmptyPositiveSet(_) => "empty_positive_set",
            Error::ZeroNormFeature(_) => "zero_norm_feature",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::ParamMismatch(_) => "param_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
