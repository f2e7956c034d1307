use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch { context: &'static str, expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("set is empty: {0}")]
    EmptySet(String),

    #[error("set is unbounded in the requested direction")]
    Unbounded,

    #[error("closed-loop matrix is not Schur stable (spectral radius {0:.6})")]
    Unstable(f64),

    #[error("iteration cap of {cap} reached in {context}")]
    IterationCap { context: &'static str, cap: usize },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("quadratic program is infeasible")]
    QpInfeasible,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}
