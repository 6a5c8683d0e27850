use numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation failed for {id}: {message}")]
    Validation { id: String, message: String },
    #[error("utterance {0} is REPHRASE but has no reference rephrase")]
    InvalidUtterance(String),
    #[error("missing predictions for {} utterances: {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },
    #[error("pair {0} is not covered by the phrase vocabulary")]
    NotCovered(usize),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
