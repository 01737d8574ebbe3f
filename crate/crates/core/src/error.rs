use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("node `{node}`: {msg}")]
    Node { node: String, msg: String },

    #[error("shape mismatch at `{node}`: {msg}")]
    Shape { node: String, msg: String },

    #[error("graph is cyclic (involving `{0}`)")]
    Cyclic(String),

    #[error("checksum mismatch for `{node}.{param}`: manifest {expected:08x}, blob {actual:08x}")]
    Checksum {
        node: String,
        param: String,
        expected: u32,
        actual: u32,
    },

    #[error("invalid index set: {0}")]
    IndexSet(String),

    #[error("grouping: {0}")]
    Grouping(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn node(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Node {
            node: node.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            msg: msg.into(),
        }
    }
}
