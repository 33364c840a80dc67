use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 1..={num_steps}")]
    TimestepOutOfRange { t: usize, num_steps: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exact guidance requires the closed-form toy score model")]
    ExactGuidanceUnavailable,

    #[error("training diverged at iteration {iteration}: last finite loss {last_loss}")]
    TrainingDiverged { iteration: usize, last_loss: f64 },

    #[error("estimation failure: {0}")]
    Estimation(String),

    #[error("sampling failed in chain {chain} at timestep {t}: {source}")]
    Chain {
        chain: usize,
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
