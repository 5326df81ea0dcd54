use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("unknown operation kind `{0}`")]
    UnknownOp(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("variable belongs to tape {found}, expected tape {expected}")]
    ForeignVariable { expected: u64, found: u64 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("coarsening cannot reach target {target} nodes (closest level has {closest})")]
    UnreachableTarget { target: usize, closest: usize },

    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("row {row} has empty support")]
    EmptyRow { row: usize },

    #[error("batch norm needs at least 2 samples per channel in train mode, got {0}")]
    InsufficientSamples(usize),

    #[error("gconv kind mismatch: layer is {found}, operation expects {expected}")]
    KindMismatch { expected: &'static str, found: &'static str },

    #[error("missing scale transfer from scale {from} to scale {to}")]
    MissingTransfer { from: usize, to: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("node count mismatch: expected {expected}, found {found}")]
    NodeCountMismatch { expected: usize, found: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },

    #[error("truncated file: last good record is {last_good}")]
    Truncated { last_good: usize },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
