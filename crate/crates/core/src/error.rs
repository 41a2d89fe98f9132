use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TslError> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants are grouped by the exit code the CLI maps them to (see
/// [`TslError::exit_code`]).
#[derive(Debug, Error)]
pub enum TslError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("video id mismatch: {0} vs {1}")]
    VideoIdMismatch(String, String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unknown video ids in predictions: {0:?}")]
    UnknownVideos(Vec<String>),
    #[error("nothing to evaluate: ground truth is empty")]
    EmptyGroundTruth,
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {0} exists and is not empty (use --force)")]
    OutputExists(PathBuf),
}

impl TslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TslError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            TslError::NonFiniteLoss { .. } | TslError::Numeric(_) => 3,
            TslError::Io { .. } | TslError::OutputExists(_) => 4,
            _ => 2,
        }
    }

    /// Short stable identifier printed on the first line of CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            TslError::Dimension { .. } => "E_DIMENSION",
            TslError::Config(_) => "E_CONFIG",
            TslError::EmptyInput(_) => "E_EMPTY_INPUT",
            TslError::InputTooShort(_) => "E_INPUT_TOO_SHORT",
            TslError::FullyMasked { .. } => "E_FULLY_MASKED",
            TslError::NotScalar(_) => "E_NOT_SCALAR",
            TslError::VideoIdMismatch(..) => "E_VIDEO_ID",
            TslError::Validation(_) => "E_VALIDATION",
            TslError::UnknownVideos(_) => "E_UNKNOWN_VIDEO",
            TslError::EmptyGroundTruth => "E_EMPTY_GT",
            TslError::CheckpointMismatch(_) => "E_CHECKPOINT",
            TslError::BadMagic { .. } => "E_MAGIC",
            TslError::BadVersion(_) => "E_VERSION",
            TslError::Truncated { .. } => "E_TRUNCATED",
            TslError::Malformed(_) => "E_MALFORMED",
            TslError::Json(_) => "E_JSON",
            TslError::NonFiniteLoss { .. } => "E_NAN_LOSS",
            TslError::Numeric(_) => "E_NUMERIC",
            TslError::Io { .. } => "E_IO",
            TslError::OutputExists(_) => "E_OUTPUT_EXISTS",
        }
    }
}
