use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("timestep {t} outside {lo}..={hi}")]
    Timestep { t: usize, lo: usize, hi: usize },

    #[error("queue invariant violated: {0}")]
    QueueInvariant(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("numerical divergence at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by user input (bad config, bad file) rather than
    /// failures during a run.
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Format { .. })
    }
}
