use thiserror::Error;

/// Errors raised by the simulator, designers and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its allowed range.
    #[error("invalid configuration: {0}")]
    Validation(String),

    /// A query fell outside the domain of the data it addresses.
    #[error("out of range: {0}")]
    Range(String),

    /// The tip touched the surface (negative gap).
    #[error("tip crash at ({x_nm:.3} nm, {y_nm:.3} nm), gap {gap_angstrom:.3} Å")]
    Crash {
        x_nm: f64,
        y_nm: f64,
        gap_angstrom: f64,
    },

    /// The loop error stayed above the instability threshold.
    #[error("loop unstable at t = {t_s:.4} s")]
    Unstable { t_s: f64 },

    /// A procedure could not reach its goal (approach out of steps, empty region, ...).
    #[error("procedure failed: {0}")]
    Failed(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
