use thiserror::Error;

/// Crate-wide error type. Variants are deliberately specific so callers
/// (and the CLI) can report which stage of a run went wrong.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("duplicate tensor name in header: {0}")]
    DuplicateName(String),

    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("byte-length mismatch: header declares {declared} payload bytes, file has {actual}")]
    ByteLengthMismatch { declared: u64, actual: u64 },

    #[error("tensor {name:?}: shape {shape:?} needs {expected} bytes, offsets span {actual}")]
    ShapeByteMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        actual: u64,
    },

    #[error("shape mismatch for {name:?}: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("parameter sets are not compatible: {0}")]
    Incompatible(String),

    #[error("tensor {name:?} contains a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("mask tensor {name:?} has value {value} at flat index {index}; masks must be exactly 0 or 1")]
    InvalidMaskValue {
        name: String,
        index: usize,
        value: f32,
    },

    #[error("expected {expected:?} data for tensor {name:?}, found {found:?}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("layer Hessian for {layer:?} is not positive definite (damping too small or degenerate activations)")]
    NotPositiveDefinite { layer: String },

    #[error("missing calibration records for masked layers: {layers:?}")]
    MissingCalibration { layers: Vec<String> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed dataset line {line}: {reason}")]
    MalformedDataset { line: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an error with the pipeline stage it surfaced in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Error {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
