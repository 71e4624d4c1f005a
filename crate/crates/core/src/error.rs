use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("probability {0} is outside the open interval (0, 1)")]
    Probability(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance factorization failed: {0}")]
    Factorization(String),

    #[error("every mixture component has zero variance; the quantile of a purely discrete law is not supported")]
    DiscreteLaw,

    #[error("alpha = {alpha} must be strictly below the smallest mixing weight {min_rho}")]
    AlphaTooLarge { alpha: f64, min_rho: f64 },

    #[error("expected-return floor {floor} is infeasible; the largest achievable mean is {max}")]
    InfeasibleFloor { floor: f64, max: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("EM fitting failed: {0}")]
    EmFailed(String),

    #[error("CVaR {0} is not positive; percentage error is undefined")]
    NonPositiveCvar(f64),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
