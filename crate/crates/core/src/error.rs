use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token {token} out of range for vocab of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence of length {len} is too long for context {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence of length {len} shorter than required {required}")]
    SequenceTooShort { len: usize, required: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("graph is detached: {0}")]
    DetachedGraph(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("parameter trees are not congruent: {0}")]
    Incongruent(String),

    #[error("{0}")]
    Routing(String),

    #[error("empty shard for path {0}")]
    EmptyShard(usize),

    #[error("missing module {0}")]
    MissingModule(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("simulation deadlock: {0}")]
    Deadlock(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
