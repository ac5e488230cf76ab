use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum OdbError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate ramp: initial and final frequency are equal ({0} rad/s); use a hold segment")]
    DegenerateRamp(f64),

    #[error("unrealizable pulse: induced omega^2 = {omega_sq:.6e} < 0 at t = {t:.6e} s")]
    UnrealizablePulse { t: f64, omega_sq: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OdbError>;
