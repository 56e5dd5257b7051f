use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data: input is empty")]
    EmptyInput,

    #[error("data: column `{0}` not found in header")]
    MissingColumn(String),

    #[error("data: row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("data: {0}")]
    Validation(String),

    #[error("crossfit: dimension {dim} has {clusters} clusters, fewer than K = {k}")]
    InfeasiblePartition { dim: usize, clusters: usize, k: usize },

    #[error("crossfit: {0}")]
    InvalidFold(String),

    #[error("nuisance: {0}")]
    InvalidPenalty(String),

    #[error("{context}: dimension mismatch, expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("score: fold {fold:?} has no training observations")]
    FoldInfeasible { fold: Vec<usize> },

    #[error("estimator: Jacobian is singular (singular values {singular_values:?})")]
    DegenerateIdentification { singular_values: Vec<f64> },

    #[error("estimator: variance r'Σr = {0} is not positive")]
    NonPositiveVariance(f64),

    #[error("estimator: repetition with plan seed {seed} failed: {source}")]
    Repetition {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("simulate: {failed} of {total} replicates failed (first: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("data: csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input) map to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateIdentification { .. }
            | Error::NonPositiveVariance(_)
            | Error::TooManyFailures { .. } => true,
            Error::Repetition { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
