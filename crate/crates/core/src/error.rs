use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("score {0} is outside the 0-4 scale")]
    ScoreOutOfRange(i64),

    #[error("unknown score word {0:?}")]
    UnknownScoreWord(String),

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(String),

    #[error("non-finite loss on batch [{}]", ids.join(", "))]
    NonFiniteLoss { ids: Vec<String> },

    #[error("backend initialisation failed: {0}")]
    Backend(String),

    #[error("optimiser did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        /// Parameter vector at the last accepted iterate.
        last_iterate: Vec<f64>,
    },

    #[error("information leak: {count} evaluation responses were seen in training (e.g. {example})")]
    Leak { count: usize, example: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
