use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed trait declaration or model configuration.
    #[error("specification error: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Input data disagrees with the declared layout or the tree.
    #[error("data error: {0}")]
    Data(String),

    #[error("newick syntax error at byte {offset}: {message}")]
    Newick { offset: usize, message: String },

    /// A latent value sits exactly on a wall or a categorical tie.
    #[error("latent value on a constraint boundary (trait {trait_index})")]
    Boundary { trait_index: usize },

    #[error("initial state violates the observed-trait constraints")]
    InconsistentState,

    #[error("event cap of {cap} exceeded in a single trajectory")]
    EventCap { cap: usize },

    #[error("negative advance time {0}")]
    NegativeTime(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("index {index} out of range for dimension {dim}")]
    OutOfRange { index: usize, dim: usize },

    #[error("not enough samples: {0}")]
    TooFewSamples(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampler diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Spec(_) => "spec",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Newick { .. } => "newick",
            Error::Boundary { .. } => "boundary",
            Error::InconsistentState => "inconsistent-state",
            Error::EventCap { .. } => "event-cap",
            Error::NegativeTime(_) => "negative-time",
            Error::NotPositiveDefinite(_) => "not-positive-definite",
            Error::OutOfRange { .. } => "out-of-range",
            Error::TooFewSamples(_) => "too-few-samples",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Divergence(_) => "divergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit code: 1 for configuration, 2 for input data, 3 for
    /// failures while sampling.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Spec(_) | Error::Config(_) | Error::InvalidArgument(_) | Error::OutOfRange { .. } => 1,
            Error::Data(_) | Error::Newick { .. } | Error::TooFewSamples(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
            Error::Divergence(_)
            | Error::Boundary { .. }
            | Error::InconsistentState
            | Error::EventCap { .. }
            | Error::NegativeTime(_)
            | Error::NotPositiveDefinite(_) => 3,
        }
    }
}
