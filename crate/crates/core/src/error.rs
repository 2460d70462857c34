use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tail mass {mass:.3e} beyond the horizon t = {horizon} (reject policy)")]
    TailMass { mass: f64, horizon: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("unknown node: {0}")]
    Node(String),

    #[error("concatenation mismatch: {0}")]
    Concat(String),

    #[error("depth guard: {0}")]
    Depth(String),

    #[error("model mismatch: {0}")]
    Model(String),

    #[error("linear program infeasible: {0}")]
    Infeasible(String),

    #[error("solver failure: {message}")]
    Solver { message: String, log: Vec<String> },

    #[error("dual certificate failure: {0}")]
    Dual(String),

    #[error("pair mismatch: {0}")]
    Pair(String),

    #[error("swap rejected: {0}")]
    Swap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn solver(message: impl Into<String>) -> Self {
        Error::Solver {
            message: message.into(),
            log: Vec::new(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
