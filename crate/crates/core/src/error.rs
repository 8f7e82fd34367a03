use thiserror::Error;

/// Errors produced by the inference, training and experiment routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("functional has no closed-form expectation: {0}")]
    UnsupportedFunctionalForm(String),

    #[error("invalid mixing constants: sigma_minus={sigma_minus}, sigma_plus={sigma_plus}")]
    InvalidMixingConstants { sigma_minus: f64, sigma_plus: f64 },

    #[error("unsupported primitive: {0}")]
    UnsupportedPrimitive(String),

    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),

    #[error("particle weights collapsed at step {step}")]
    WeightCollapse { step: usize },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("bound violated on {violations} of {instances} instances")]
    BoundViolation { violations: usize, instances: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn not_pd(context: impl Into<String>) -> Self {
        Error::NotPositiveDefinite {
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
