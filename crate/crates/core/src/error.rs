//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument's domain was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// A schedule, atlas or experiment configuration does not resolve.
    #[error("configuration error: {0}")]
    Config(String),

    /// Root finding failed to converge on a specific branch.
    #[error("root finder did not converge on map `{label}`, branch {branch} (y = {y})")]
    RootFind { label: String, branch: usize, y: f64 },

    /// A cylinder enumeration would exceed the configured cap.
    #[error("resource limit: {0}")]
    Resource(String),

    /// A covariance matrix is numerically singular.
    #[error("singular covariance: lambda_min = {lambda_min:.3e} <= tol = {tol:.3e}")]
    SingularCovariance { lambda_min: f64, tol: f64 },

    /// A series or iteration hit its term cap before converging.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
