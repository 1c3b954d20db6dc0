use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::linalg::LinalgError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    #[error("undefined redundancy: similarity matrix has size {0}, need at least 2")]
    UndefinedRedundancy(usize),
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },
    #[error("empty data: {0}")]
    EmptyData(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn topology(msg: impl Into<String>) -> Self {
        Self::Topology(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Self::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
