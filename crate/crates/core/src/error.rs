use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the public operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bundle incomplete: {0}")]
    BundleIncomplete(String),

    #[error("bundle corrupt: {0}")]
    BundleCorrupt(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("node {node} out of range (graph has {num_nodes} nodes)")]
    NodeOutOfRange { node: usize, num_nodes: usize },

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("backward requires a scalar (1x1) loss")]
    NotScalar,

    #[error("mask is empty")]
    EmptyMask,

    #[error("second-order path unsupported for this surrogate: {0}")]
    SecondOrderUnsupported(String),

    #[error("structure generator called outside GCond mode")]
    StructureModeMismatch,

    #[error("too few points: have {have}, need {need}")]
    TooFewPoints { have: usize, need: usize },

    #[error("no non-target train nodes available to poison")]
    NothingToPoison,

    #[error("adjacency required for graph models")]
    AdjacencyRequired,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
