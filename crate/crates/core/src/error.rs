use std::io;

/// Errors produced by the prediction toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("trajectory must contain at least one sample")]
    EmptyTrajectory,

    #[error("invalid trajectory `{agent}`: {reason}")]
    InvalidTrajectory { agent: String, reason: String },

    #[error("degenerate reference path `{0}`: need at least two distinct vertices")]
    DegeneratePath(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid belief: {0}")]
    InvalidBelief(String),

    #[error("prior and likelihood have disjoint support")]
    ContradictoryEvidence,

    #[error("candidate path `{path}` enters from branch {found}, expected {expected}")]
    EntryLaneMismatch { path: String, expected: u8, found: u8 },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (reconstruction {reconstruction}, kl {kl})")]
    NonFiniteLoss { epoch: usize, batch: usize, reconstruction: f64, kl: f64 },

    #[error("model parameters are untrained")]
    Untrained,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
