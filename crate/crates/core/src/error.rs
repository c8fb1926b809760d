use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user configuration: unknown column, invalid option value, malformed spec.
    #[error("configuration error: {0}")]
    Config(String),

    /// Data violates a structural precondition (e.g. a non-binary instrument).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("identification error: {0}")]
    Identification(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("perfect separation: coefficient {column} diverging towards {direction}")]
    Separation { column: usize, direction: String },

    #[error("no convergence after {iterations} iterations (loglik {loglik}, score max-norm {score_norm:e})")]
    NonConvergence {
        iterations: usize,
        loglik: f64,
        score_norm: f64,
    },

    #[error("trim error: {0}")]
    Trim(String),

    #[error(
        "leverage error: observation {row} has hat diagonal {leverage} (self-identifying; raise min_arm_size)"
    )]
    Leverage { row: usize, leverage: f64 },

    #[error("test undefined: {0}")]
    TestUndefined(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the error class: 2 for configuration/input
    /// problems, 1 for domain, identification and numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
