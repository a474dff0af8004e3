use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::ChunkId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("position {0} collides with an existing cache entry")]
    PositionCollision(u32),

    #[error("attention mask row {0} has no visible key")]
    EmptyMaskRow(usize),

    #[error("chunk {0} already has a cached record")]
    DuplicateRecord(ChunkId),

    #[error("no cached record for chunk {0}")]
    MissingRecord(ChunkId),

    #[error("cannot free {needed} bytes in the {tier} tier")]
    CapacityExhausted { needed: u64, tier: &'static str },

    #[error("invalid sparse attention plan: {0}")]
    InvalidPlan(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("infeasible corpus specification: {0}")]
    InfeasibleSpec(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
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
