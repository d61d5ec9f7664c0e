use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no (start, goal) pair has a shortest path of {min_hops}..={max_hops} hops")]
    InfeasibleEpisode { min_hops: usize, max_hops: usize },
    #[error("degenerate bearing: points coincide in the horizontal plane")]
    DegenerateBearing,
    #[error("caption yielded no landmarks")]
    EmptyLandmarks,
    #[error("no negative candidate available (only one navigable view)")]
    NoNegativeAvailable,
    #[error("positive and negative reasoning texts are identical")]
    DegeneratePair,
    #[error("token not in vocabulary: {0:?}")]
    VocabMiss(String),
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("action index {index} out of range for {n_actions} actions")]
    InvalidAction { index: usize, n_actions: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used in CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidInput(_) => "invalid-input",
            Error::InfeasibleEpisode { .. } => "infeasible-episode",
            Error::DegenerateBearing => "degenerate-bearing",
            Error::EmptyLandmarks => "empty-landmarks",
            Error::NoNegativeAvailable => "no-negative-available",
            Error::DegeneratePair => "degenerate-pair",
            Error::VocabMiss(_) => "vocab-miss",
            Error::SequenceTooLong { .. } => "sequence-too-long",
            Error::InvalidLabel(_) => "invalid-label",
            Error::InvalidAction { .. } => "invalid-action",
            Error::NumericalFailure(_) => "numerical-failure",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
