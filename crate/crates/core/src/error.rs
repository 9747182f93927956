use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Inconsistent geometry or experiment setup (indivisible torus side, tiling mismatch).
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// The request is well-formed but beyond what the implementation enumerates.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A state space or table would exceed its size cap.
    #[error("size limit exceeded for {what}: needs {needed}, limit {limit}")]
    Size { what: &'static str, needed: u64, limit: u64 },
    /// An iterative method stopped before reaching its tolerance.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { what: &'static str, iterations: usize, residual: f64 },
    /// The diagonal remainder of the covariance decomposition dropped below 1/2.
    #[error("remainder diagonal entry {index} is {value}, below 1/2")]
    RemainderPositivity { index: usize, value: f64 },
    /// A jump-kernel offset aliases with another one on the torus.
    #[error("jump offset of radius {radius} is ambiguous on a torus of side {side}")]
    WrapAmbiguity { radius: i64, side: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
