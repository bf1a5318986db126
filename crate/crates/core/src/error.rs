use thiserror::Error;

/// Errors raised anywhere in the engine, the attack, or the training loop.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("expected a rank-{expected} array, got shape {got:?}")]
    BadRank { expected: usize, got: Vec<usize> },
    #[error("adversarial style prefix has a gap: block {0} is missing")]
    PrefixGap(usize),
    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("support set is missing class {0}")]
    MissingClass(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid config at line {line}: {msg}")]
    InvalidConfig { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
