use thiserror::Error;

/// Errors raised by the numerical kernels, the solver and the scenario runner.
#[derive(Debug, Error)]
pub enum PikError {
    /// Input outside the domain of an operation (bad dimensions, negative damping, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An evaluator produced NaN/Inf or otherwise unusable data.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical procedure broke down (singular system, non-finite result).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Index outside `0..len`.
    #[error("index {index} out of range for {len} tasks")]
    IndexOutOfRange { index: usize, len: usize },

    /// Scenario configuration rejected; `field` is a dotted path such as `solver.alpha`.
    #[error("invalid config at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Integration stopped early; the partial record is kept by the caller.
    #[error("integration failed at t = {t}: {message}")]
    Integration { t: f64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PikError {
    pub fn domain(msg: impl Into<String>) -> Self {
        Self::Domain(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Self::Numerical(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: msg.into(),
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Domain(_) => "domain",
            Self::Data(_) => "data",
            Self::Numerical(_) => "numerical",
            Self::IndexOutOfRange { .. } => "index",
            Self::Config { .. } => "config",
            Self::Integration { .. } => "integration",
            Self::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, PikError>;
