use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("candidate {spec}: {source}")]
    CandidateFit {
        spec: String,
        #[source]
        source: Box<Error>,
    },

    #[error("prediction failed: {0}")]
    Prediction(String),

    #[error("regression failed: {0}")]
    Regression(String),

    #[error("tail too small for a generalized Pareto fit ({n} exceedances, need at least 5)")]
    TailTooSmall { n: usize },

    #[error("degenerate tail sample (zero spread)")]
    DegenerateTail,

    #[error("optimizer did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize, last: Vec<f64> },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::CandidateFit { .. }
                | Error::Prediction(_)
                | Error::Regression(_)
                | Error::NoConvergence { .. }
                | Error::DegenerateTail
                | Error::TailTooSmall { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
