use std::path::PathBuf;

use thiserror::Error;

/// Errors from dense matrix arithmetic and gradient checking.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("dimension mismatch in {op}: left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradient check step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("objective is non-finite when probing {param}[{index}]")]
    NonFiniteProbe { param: String, index: usize },
    #[error("parameter set and gradient set disagree: {0}")]
    GradientLayout(String),
}

/// Errors from the optimal transport solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("marginal {which} has non-positive entry {value} at index {index}")]
    NonPositiveMarginal {
        which: &'static str,
        index: usize,
        value: f64,
    },
    #[error("marginal {which} sums to {sum}, expected 1")]
    UnnormalizedMarginal { which: &'static str, sum: f64 },
    #[error("cost matrix is {rows}x{cols} but marginals have lengths {a} and {b}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        a: usize,
        b: usize,
    },
    #[error("cost matrix has non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("regularization must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("exact solver supports square problems up to 8x8, got {rows}x{cols}")]
    OracleTooLarge { rows: usize, cols: usize },
    #[error("sinkhorn scalings became non-finite at iteration {0}")]
    Diverged(usize),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Errors from the model layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("kernel produced non-finite values")]
    NonFiniteKernel,
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Errors from feature files, manifests and the synthetic generator.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"MLOT\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported version {found}")]
    UnsupportedVersion { path: PathBuf, found: u16 },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {actual} bytes where {expected} were expected")]
    TrailingBytes {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: unknown modality code {code}")]
    UnknownModality { path: PathBuf, code: u8 },
    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFiniteValue { path: PathBuf, row: usize, col: usize },
    #[error("{path}: sequence must have at least one row and column, got {rows}x{cols}")]
    EmptySequence {
        path: PathBuf,
        rows: usize,
        cols: usize,
    },
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {id:?} is missing the {modality} feature path")]
    MissingModality { id: String, modality: String },
    #[error("training split needs both classes, found {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed bytes on disk rather than a
    /// missing file or a bad request.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            DataError::BadMagic { .. }
                | DataError::UnsupportedVersion { .. }
                | DataError::Truncated { .. }
                | DataError::TrailingBytes { .. }
                | DataError::UnknownModality { .. }
                | DataError::NonFiniteValue { .. }
                | DataError::EmptySequence { .. }
        )
    }
}

/// Errors from training, evaluation and checkpoint handling.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split {0} is empty")]
    EmptySplit(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: u64 },
    #[error("non-finite gradient in {param}; step rejected")]
    NonFiniteGradient { param: String },
    #[error("checkpoint {path}: bad magic {found:?}, expected \"MLCK\"")]
    CheckpointMagic { path: PathBuf, found: [u8; 4] },
    #[error("checkpoint {path}: {message}")]
    CheckpointCorrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.into(),
            source,
        }
    }
}
