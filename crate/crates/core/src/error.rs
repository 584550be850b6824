use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad or inconsistent configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a documented precondition (dimension mismatch etc).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical divergence at t={t}: non-finite drift for state {x:?}")]
    Divergence { t: f64, x: Vec<f64> },

    #[error("degenerate transition at t={t}: diffusion g(t) is zero, transition density undefined")]
    DegenerateTransition { t: f64 },

    #[error("degenerate weights{}: every log-weight is -inf", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    DegenerateWeights { step: Option<usize> },

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, batch: usize, loss: f64 },

    #[error("chain {chain}: {source}")]
    Chain {
        chain: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}:{line}: {msg}", .path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attach a step index to a degenerate-weights error.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::DegenerateWeights { step: None } => Error::DegenerateWeights { step: Some(step) },
            other => other,
        }
    }
}
