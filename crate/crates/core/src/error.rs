use thiserror::Error;

/// Errors raised by estimators, variance estimators and tests.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum OgmmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("initialization failed: {0}")]
    Initialization(String),
    #[error("singular linear system: {0}")]
    SingularSystem(String),
    #[error("update produced non-finite parameter values")]
    NonFiniteUpdate,
    #[error("need at least {needed} observations, got {got}")]
    Underflow { needed: usize, got: usize },
    #[error("series is degenerate (all rows identical)")]
    DegenerateSeries,
    #[error("series too short: need more than {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("statistic undefined under exact identification (q = p)")]
    ExactIdentification,
    #[error("variance matrix is not positive definite: {0}")]
    SingularSigma(String),
    #[error("gradient matrix is rank deficient")]
    RankDeficientV,
    #[error("design is rank deficient: {0}")]
    RankDeficient(String),
    #[error("optimizer failed: {0}")]
    OptimizerFailed(String),
    #[error("offline fit failed: {0}")]
    OfflineFitFailed(String),
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("learning-rate scale is degenerate (quantile of gradient norms is {0})")]
    DegenerateScale(f64),
    #[error("argument outside domain: {0}")]
    Domain(String),
    #[error("bad model parameters: {0}")]
    BadParams(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, OgmmError>;

impl From<std::io::Error> for OgmmError {
    fn from(e: std::io::Error) -> Self {
        OgmmError::Io(e.to_string())
    }
}
