//! Error types shared across the crate.

use thiserror::Error;

/// Shape and graph errors raised by the tensor primitives.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("buffer length {got} does not match shape {shape:?} (expected {expected})")]
    BadLength {
        expected: usize,
        got: usize,
        shape: (usize, usize, usize),
    },

    #[error("shape mismatch in {op}: {left} has shape {left_shape:?}, {right} has shape {right_shape:?}")]
    ShapeMismatch {
        op: &'static str,
        left: &'static str,
        left_shape: (usize, usize, usize),
        right: &'static str,
        right_shape: (usize, usize, usize),
    },

    #[error("{op}: time-axis length mismatch ({left_t} vs {right_t})")]
    TimeMismatch {
        op: &'static str,
        left_t: usize,
        right_t: usize,
    },

    #[error("{op} requires time length >= {min}, got {got}")]
    TimeTooShort {
        op: &'static str,
        min: usize,
        got: usize,
    },

    #[error("expected a scalar (1, 1, 1) grid, got shape {shape:?}")]
    NotScalar { shape: (usize, usize, usize) },

    #[error("{op}: invalid argument: {what}")]
    InvalidArgument { op: &'static str, what: String },

    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },
}

/// Dataset generation, parsing, and persistence errors.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {what}")]
    Parse {
        path: String,
        line: usize,
        what: String,
    },

    #[error("{path}: {what}")]
    Format { path: String, what: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid dataset request: {0}")]
    InvalidRequest(String),
}

impl DataError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Training-time failures.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("regime {regime} requires channel '{channel}' which is missing from record '{record}'")]
    MissingChannel {
        regime: String,
        channel: &'static str,
        record: String,
    },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("loss diverged to a non-finite value at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Checkpoint serialization errors.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {got} (expected {expected})")]
    Version { expected: u32, got: u32 },

    #[error("parameter '{name}': shape mismatch (header {header:?}, model expects {expected:?})")]
    ShapeMismatch {
        name: String,
        header: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Evaluation and metric errors.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pearson_r: series length mismatch ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("pearson_r requires length >= 2, got {0}")]
    TooShort(usize),

    #[error("pearson_r undefined: {0} series is constant")]
    Degenerate(&'static str),

    #[error("no records in the requested split")]
    EmptySplit,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
