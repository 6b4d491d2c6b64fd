use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("matrix is ill-conditioned (condition estimate {0:.3e} exceeds 1e12)")]
    IllConditioned(f64),

    #[error("consensus weights must be nonnegative and sum to one (sum = {0})")]
    InvalidWeights(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("could not generate a connected environment after {0} attempts")]
    EnvironmentGeneration(usize),

    #[error("could not place {what}: {reason}")]
    Placement { what: &'static str, reason: String },

    #[error("planner exhausted the horizon cap of {0} steps without meeting the threshold")]
    HorizonExhausted(usize),

    #[error("forward cache does not belong to these parameters")]
    StaleCache,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("too few environments produced expert episodes ({succeeded} of {attempted})")]
    DatasetGeneration { succeeded: usize, attempted: usize },

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("episode aborted at step {step}: {source}")]
    Episode {
        step: usize,
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
    /// Short machine-readable tag, used for the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::IllConditioned(_) => "ill_conditioned",
            Error::InvalidWeights(_) => "invalid_weights",
            Error::Dimension(_) => "dimension",
            Error::InvalidPermutation(_) => "invalid_permutation",
            Error::EnvironmentGeneration(_) => "environment_generation",
            Error::Placement { .. } => "placement",
            Error::HorizonExhausted(_) => "horizon_exhausted",
            Error::StaleCache => "stale_cache",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::DatasetGeneration { .. } => "dataset_generation",
            Error::Format { .. } => "format",
            Error::Episode { .. } => "episode",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
