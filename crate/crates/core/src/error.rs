use thiserror::Error;

use crate::topo_map::NodeId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid node {0}")]
    InvalidNode(NodeId),
    #[error("node {to} is unreachable from {from}")]
    Unreachable { from: NodeId, to: NodeId },
    #[error("node {0} has no cached point cloud")]
    CacheMiss(NodeId),
    #[error("world generation failed: {0}")]
    Generation(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
