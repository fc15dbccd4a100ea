//! Trees, ensembles, prediction, the stamp-token guard and the ensemble
//! file format.

mod ensemble;
mod format;
mod stamped;
mod tree;

pub use ensemble::{GrowingMetadata, MulticlassStrategy, TreeEnsemble};
pub use format::{deserialize_ensemble, serialize_ensemble, MAGIC, VERSION};
pub use stamped::{StaleFlush, StampToken, StampedResource, WriteOutcome};
pub use tree::{
    DecisionTree, Direction, FeatureId, FeatureLookup, LeafValue, NodeIndex, TreeNode,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("feature {feature} outside example of {len} features")]
    FeatureOutOfRange { feature: FeatureId, len: usize },
    #[error("node {0} does not exist")]
    NodeOutOfRange(NodeIndex),
    #[error("node {0} is not a leaf")]
    NotALeaf(NodeIndex),
    #[error("leaf {0} is finalized and cannot be split")]
    SplitOnFinalizedLeaf(NodeIndex),
    #[error("split would exceed max depth {max_depth}")]
    DepthExceeded { max_depth: u32 },
    #[error("leaf value has {found} entries, expected {expected}")]
    LeafDimension { expected: usize, found: usize },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
}
