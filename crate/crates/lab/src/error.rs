use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature failed for {what}: estimated error {achieved:.3e} exceeds tolerance {tol:.3e}")]
    Quadrature { what: String, achieved: f64, tol: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate covariance: {0}")]
    Degenerate(String),

    #[error("infeasible check: {0}")]
    Infeasible(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Domain(msg.into()))
}
