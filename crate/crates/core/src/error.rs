use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("support set is empty")]
    EmptySupport,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot remove the last remaining support entry")]
    CannotRemoveLast,

    #[error("support entry {index} carries weight {weight}; removing it divides by ~0")]
    DegenerateWeight { index: usize, weight: f64 },

    #[error("loss undefined: query class {label} has zero probability under the support set")]
    UndefinedLoss { label: usize },

    #[error("k = {k} exceeds the {distinct} distinct points available")]
    InfeasibleK { k: usize, distinct: usize },

    #[error("class {class} has {have} members, {need} required")]
    InsufficientClass {
        class: usize,
        have: usize,
        need: usize,
    },

    #[error("invalid temperature grid: {0}")]
    InvalidGrid(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("cannot stratify: {0}")]
    Stratification(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("missing split {0:?}")]
    MissingSplit(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Errors arising from bad numbers rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateWeight { .. } | Error::UndefinedLoss { .. } | Error::Divergence { .. }
        )
    }
}
