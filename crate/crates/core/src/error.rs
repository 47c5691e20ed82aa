use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown benchmark system '{0}' (expected double_integrator, quadruple_tank or cartpole)")]
    UnknownSystem(String),

    #[error("matrix {0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("matrix {0} is singular")]
    Singular(&'static str),

    #[error("QP is infeasible")]
    Infeasible,

    #[error("filter failure: {0}")]
    FilterFailure(String),

    #[error("Riccati iteration did not converge after {0} iterations")]
    RiccatiDivergence(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate safe set: {0}")]
    DegenerateSet(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
