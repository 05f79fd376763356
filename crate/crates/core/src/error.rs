use std::path::PathBuf;

use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown precision format `{0}` (expected fp16, tf32, fp32 or fp64)")]
    UnknownFormat(String),
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("byte count of shape {0:?} overflows u64")]
    ByteCountOverflow(Vec<usize>),

    #[error("graph contains a cycle through node {0}")]
    Cycle(NodeId),
    #[error("node {node} references unknown operand {operand}")]
    UnknownOperand { node: NodeId, operand: NodeId },
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("shape mismatch at node {node}: {detail} (operand shapes {shapes:?})")]
    ShapeMismatch {
        node: NodeId,
        detail: String,
        shapes: Vec<Vec<usize>>,
    },
    #[error("node {node}: {detail}")]
    InvalidNode { node: NodeId, detail: String },
    #[error("graph has no outputs")]
    NoOutputs,

    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("input `{name}` has shape {actual:?}, expected {expected:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    TensorLength { shape: Vec<usize>, len: usize },
    #[error("precision config does not match graph: {0}")]
    ConfigMismatch(String),
    #[error("shape mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no configuration satisfies the tolerance (err {err:e} > epsilon {epsilon:e})")]
    Infeasible { err: f64, epsilon: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("stale precision map for `{function}`: map fingerprint {found}, graph fingerprint {expected}")]
    FingerprintMismatch {
        function: String,
        expected: String,
        found: String,
    },

    #[error("component {component}: scale matrix is not positive definite")]
    NotPositiveDefinite { component: usize },
    #[error("frame contains no points")]
    EmptyFrame,
    #[error("numerical failure: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Malformed {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}
