use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty cohort")]
    EmptyCohort,

    #[error("non-finite error metric")]
    NonFiniteErrorMetric,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch at index {index}: expected {expected}, found {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("boundary gradient undefined")]
    BoundaryGradient,

    #[error("{solver} solver diverged at iteration {iteration}")]
    Divergence { solver: &'static str, iteration: usize },

    #[error("partition infeasible: {0}")]
    Infeasible(String),

    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures that arise from the numbers themselves (non-finite
    /// values, diverging solvers) rather than from malformed input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_)
            | Error::NonFiniteErrorMetric
            | Error::BoundaryGradient
            | Error::Divergence { .. } => true,
            Error::Client { source, .. } | Error::Round { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
