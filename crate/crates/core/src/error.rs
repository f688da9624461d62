use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("argument {value} outside the domain {domain}")]
    DomainError { value: f64, domain: String },

    #[error("moment function produced a non-finite value at theta = {theta:?}")]
    NonFiniteMoment { theta: Vec<f64> },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown divergence `{0}`")]
    UnknownDivergence(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("model has no theta-Jacobian (indicator or otherwise non-smooth moments)")]
    NonSmoothModel,

    #[error("the UMRE correction requires an additive group")]
    NonAdditiveGroup,

    #[error("empirical Fisher information is singular (condition number {cond:e})")]
    SingularFisher { cond: f64 },

    #[error("no feasible parameter value: every probe of the profile divergence was infeasible")]
    NoFeasibleRegion,

    #[error("exponential tilt did not converge after {0} iterations")]
    TiltMaxIterations(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag, used in JSON error fields.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DomainError { .. } => "DomainError",
            Error::NonFiniteMoment { .. } => "NonFiniteMoment",
            Error::UnknownModel(_) => "UnknownModel",
            Error::UnknownDivergence(_) => "UnknownDivergence",
            Error::Dimension(_) => "Dimension",
            Error::InvalidSample(_) => "InvalidSample",
            Error::NonSmoothModel => "NonSmoothModel",
            Error::NonAdditiveGroup => "NonAdditiveGroup",
            Error::SingularFisher { .. } => "SingularFisher",
            Error::NoFeasibleRegion => "NoFeasibleRegion",
            Error::TiltMaxIterations(_) => "MaxIterations",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }
}
