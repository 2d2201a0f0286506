use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exploration accepted {accepted} of {required} samples after {attempts} attempts")]
    ExplorationFailed {
        accepted: usize,
        required: usize,
        attempts: usize,
    },

    #[error("degenerate normalization: {0} values have zero spread")]
    DegenerateNormalization(&'static str),

    #[error("neighborhood graph is disconnected")]
    DisconnectedGraph,

    #[error("all points are identical")]
    IdenticalPoints,

    #[error("embedding has no positive eigenvalue")]
    DegenerateEmbedding,

    #[error("matrix rank {rank} is below the required {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("target is unreachable: {0}")]
    Unreachable(String),

    #[error("stage `{stage}` requires `{missing}`; run stage `{requires}` first")]
    MissingArtifact {
        stage: String,
        requires: String,
        missing: PathBuf,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed artifact {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
