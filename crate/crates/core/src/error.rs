use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A closed-form expression left its domain (negative radicand, parallel
    /// rays, zero denominator). Grid pruning treats this as "infeasible".
    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible geometry: {0}")]
    Infeasible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("bisection failed to bracket: {0}")]
    Bracketing(String),

    #[error("empty grid: {0}")]
    EmptyGrid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trial {trial} at sweep point `{point}` failed: {source}")]
    Trial { trial: u64, point: String, source: Box<Error> },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
