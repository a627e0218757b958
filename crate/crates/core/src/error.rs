use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: edge endpoint {id} does not name a known node")]
    DanglingEndpoint { line: usize, id: i64 },

    #[error("line {line}: duplicate node id {id}")]
    DuplicateNode { line: usize, id: i64 },

    #[error("node {node} out of range for graph with {n_nodes} nodes")]
    NodeOutOfRange { node: usize, n_nodes: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported format or version: {0}")]
    Version(String),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("graph with {n_nodes} nodes is too large for a dense solve (limit {limit})")]
    TooLarge { n_nodes: usize, limit: usize },

    #[error("non-finite value in `{tensor}` at step {step}")]
    NonFinite { step: u64, tensor: String },

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
