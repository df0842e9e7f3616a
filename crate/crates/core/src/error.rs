use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value {value:?} in column `{column}` at row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("share-sum violation at row {row}: shares sum to {sum}")]
    ShareSum { row: usize, sum: f64 },

    #[error("nonpositive population size {n} at row {row}")]
    NonPositiveSize { row: usize, n: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("group {0} is absent from the data (all n·x̄ are zero)")]
    GroupAbsent(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design is rank deficient (rank {rank} < {cols} columns) and lambda is zero")]
    RankDeficient { rank: usize, cols: usize },

    #[error("leverage of observation {0} is numerically one")]
    Leverage(usize),

    #[error("every lambda in the grid was skipped")]
    AllLambdaSkipped,

    #[error("quadratic program is infeasible: {0}")]
    Infeasible(String),

    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("linear algebra failure: {0}")]
    LinAlg(String),

    #[error("truncated normal sampler exhausted its iteration budget")]
    SamplerExhausted,
}

impl Error {
    /// Whether the error stems from bad input rather than a numerical
    /// failure. The CLI maps the former to exit code 1 and the latter to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::MissingColumn(_)
                | Error::NonNumeric { .. }
                | Error::ShareSum { .. }
                | Error::NonPositiveSize { .. }
                | Error::InvalidData(_)
                | Error::GroupAbsent(_)
                | Error::Dimension(_)
                | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
