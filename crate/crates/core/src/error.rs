use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("topology {location}: {message}")]
    Topology { location: String, message: String },

    #[error("matrix `{role}` is not positive definite")]
    NotPositiveDefinite { role: &'static str },

    #[error("matrix `{role}` is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { role: &'static str, min_eigenvalue: f64 },

    #[error("matrix `{role}` is not symmetric")]
    NotSymmetric { role: &'static str },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("innovation matrix is singular and sigma2 = 0; a positive measurement noise variance is required")]
    ZeroMeasurementNoise,

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("gramian is identically zero")]
    ZeroGramian,

    #[error("infeasible selection constraint: {0}")]
    Infeasible(String),

    #[error("greedy step for path {path} produced d = {d:e}; phi is not positive semidefinite")]
    NumericalFailure { path: usize, d: f64 },

    #[error("trend basis is rank deficient on the measured paths")]
    RankDeficient,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("degenerate evaluation: {0}")]
    Degenerate(String),

    #[error("slot {slot}: {source}")]
    AtSlot {
        slot: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn topology(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Topology {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_slot(self, slot: usize) -> Self {
        match self {
            e @ Error::AtSlot { .. } => e,
            e => Error::AtSlot {
                slot,
                source: Box::new(e),
            },
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Topology { .. } => "topology",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::NotPsd { .. } => "not_psd",
            Error::NotSymmetric { .. } => "not_symmetric",
            Error::Dimension(_) => "dimension",
            Error::ZeroMeasurementNoise => "zero_measurement_noise",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::ZeroGramian => "zero_gramian",
            Error::Infeasible(_) => "infeasible",
            Error::NumericalFailure { .. } => "numerical_failure",
            Error::RankDeficient => "rank_deficient",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Trace(_) => "trace",
            Error::Degenerate(_) => "degenerate",
            Error::AtSlot { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
