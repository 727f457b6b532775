use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid model: {0}")]
    InvalidGrid(String),

    #[error("corrupted action: {0}")]
    CorruptedAction(String),

    #[error("missing voltage setpoint for generator {0}")]
    MissingSetpoint(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("{file}: row {row}: {message}")]
    Chronic {
        file: PathBuf,
        row: usize,
        message: String,
    },

    #[error("invalid chronic: {0}")]
    InvalidChronic(String),

    #[error("time step {t} out of range (length {len})")]
    StepOutOfRange { t: usize, len: usize },

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("unusable scenario: {0}")]
    UnusableScenario(String),

    #[error("environment is finished; call reset before stepping again")]
    EpisodeFinished,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error("buffer holds {have} experiences, {want} requested")]
    Underfull { have: usize, want: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
