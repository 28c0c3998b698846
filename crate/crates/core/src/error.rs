use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The CLI maps each variant to an exit code through [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("infinite variance: {0}")]
    InfiniteVariance(String),
    #[error("infeasible KKT point: {0}")]
    Infeasible(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numeric error at probe {probe}, degree {degree}: {msg}")]
    ProbeNumeric {
        probe: usize,
        degree: usize,
        msg: String,
    },
    #[error("spectrum left the declared interval at probe {probe}, degree {degree}")]
    SpectrumEscaped { probe: usize, degree: usize },
    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },
    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Parameter(_) | Error::Config(_) => Category::Config,
            Error::Parse { .. } | Error::Io { .. } | Error::Dimension(_) => Category::Data,
            _ => Category::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
