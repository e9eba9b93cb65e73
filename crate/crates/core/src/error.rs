use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("matrix is singular or indefinite: {0}")]
    SingularMatrix(String),
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("state grid exceeded {max_states} states before closure; raise max_states or lower r_max")]
    GridOverflow { max_states: usize },
    #[error("relative value iteration did not converge after {iterations} iterations; the loss rates may be outside the stabilizable region (last span {last_span:e})")]
    PossiblyUnstable {
        iterations: usize,
        last_span: f64,
        span_history: Vec<f64>,
    },
    #[error("minorization could not be certified: {0}")]
    Minorization(String),
    #[error("stability verdicts violate order-convexity: {0}")]
    Consistency(String),
}
