use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("state {0} has zero occupancy; policy is undefined there")]
    UnreachableState(usize),

    #[error("state {state} out of range (S = {num_states})")]
    StateOutOfRange { state: usize, num_states: usize },

    #[error("utility `{0}` has no Fenchel dual; use the chain-rule or composite estimator")]
    DualFree(String),

    #[error("log barrier violated: cost value {cost} >= budget {budget}")]
    BarrierViolated { cost: f64, budget: f64 },

    #[error("empty episode batch")]
    EmptyBatch,

    #[error("ascent diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
