use thiserror::Error;

/// Errors raised by the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state diverged at t={time}: {detail}")]
    Diverged { time: usize, detail: String },

    #[error("innovation covariance is singular at t={time}")]
    SingularInnovation { time: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("similarity transform is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularTransform { condition: f64 },

    #[error("sub-Markov table is missing {} key(s): {}", .0.len(), .0.join(", "))]
    MissingKeys(Vec<String>),

    #[error("key enumeration would produce {count} columns, cap is {cap}")]
    TooManyKeys { count: u128, cap: u128 },

    #[error("degenerate excitation for key {key}: {detail}")]
    DegenerateExcitation { key: String, detail: String },

    #[error("{} key(s) failed to estimate: {}", .0.len(), .0.iter().map(|(k, e)| format!("{k} ({e})")).collect::<Vec<_>>().join("; "))]
    KeyFailures(Vec<(String, String)>),

    #[error("data set too short: need more than {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("normal matrix is rank deficient (deficiency {deficiency})")]
    RankDeficient { deficiency: usize },

    #[error("ill-conditioned hyperparameters: {0}")]
    IllConditioned(String),

    #[error("Hankel matrix has rank {measured}, realization requires {required}")]
    RankHypothesis { measured: usize, required: usize },

    #[error("selection reached rank {achieved} of the requested {requested}")]
    SelectionRank { achieved: usize, requested: usize },

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("degenerate reference signal: {0}")]
    DegenerateSignal(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
