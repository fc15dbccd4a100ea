use std::collections::BTreeMap;

use super::ModelError;
use crate::histogram::SplitCandidate;

pub type FeatureId = u32;
pub type NodeIndex = u32;

/// Per-leaf score vector. Length 1 unless the ensemble stores per-class
/// scores at each leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafValue(pub(crate) Vec<f64>);

impl LeafValue {
    pub fn new(scores: Vec<f64>) -> Result<Self, ModelError> {
        if scores.is_empty() {
            return Err(ModelError::InvalidTree("empty leaf value".into()));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidTree("non-finite leaf value".into()));
        }
        Ok(Self(scores))
    }

    pub fn scalar(v: f64) -> Self {
        Self(vec![v])
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub(crate) fn add(&self, other: &LeafValue) -> LeafValue {
        LeafValue(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: FeatureId,
        threshold: f64,
        default_direction: Direction,
        left: NodeIndex,
        right: NodeIndex,
    },
    /// `finalized` leaves were passed over by a layer build and are never
    /// split again.
    Leaf { value: LeafValue, finalized: bool },
}

/// Lookup of a feature value on one example. `Ok(None)` is a missing value;
/// `Err` means the id lies outside an example that has no missing-value
/// convention.
pub trait FeatureLookup {
    fn lookup(&self, feature: FeatureId) -> Result<Option<f64>, ModelError>;
}

/// Dense rows: NaN is missing, ids past the end are malformed.
impl FeatureLookup for [f64] {
    fn lookup(&self, feature: FeatureId) -> Result<Option<f64>, ModelError> {
        match self.get(feature as usize) {
            Some(v) if v.is_nan() => Ok(None),
            Some(&v) => Ok(Some(v)),
            None => Err(ModelError::FeatureOutOfRange {
                feature,
                len: self.len(),
            }),
        }
    }
}

impl FeatureLookup for Vec<f64> {
    fn lookup(&self, feature: FeatureId) -> Result<Option<f64>, ModelError> {
        self.as_slice().lookup(feature)
    }
}

/// A binary decision tree stored in breadth-first layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
    depth: u32,
}

impl DecisionTree {
    /// Single open root leaf.
    pub fn new_leaf(value: LeafValue) -> Self {
        Self {
            nodes: vec![TreeNode::Leaf {
                value,
                finalized: false,
            }],
            depth: 0,
        }
    }

    /// Builds a tree from raw nodes, computing the depth and running the
    /// structural checker.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self, ModelError> {
        let depths = node_depths(&nodes)?;
        let depth = depths.iter().copied().max().unwrap_or(0);
        let tree = Self { nodes, depth };
        tree.validate()?;
        Ok(tree)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn node(&self, idx: NodeIndex) -> Option<&TreeNode> {
        self.nodes.get(idx as usize)
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    /// Dimension of the leaf values (all leaves agree).
    pub fn leaf_dim(&self) -> usize {
        self.nodes
            .iter()
            .find_map(|n| match n {
                TreeNode::Leaf { value, .. } => Some(value.dim()),
                TreeNode::Split { .. } => None,
            })
            .unwrap_or(1)
    }

    /// Routes an example to a leaf index.
    pub fn leaf_index<F: FeatureLookup + ?Sized>(&self, x: &F) -> Result<NodeIndex, ModelError> {
        let mut idx: NodeIndex = 0;
        loop {
            match &self.nodes[idx as usize] {
                TreeNode::Leaf { .. } => return Ok(idx),
                TreeNode::Split {
                    feature,
                    threshold,
                    default_direction,
                    left,
                    right,
                } => {
                    let go_left = match x.lookup(*feature)? {
                        Some(v) => v < *threshold,
                        None => *default_direction == Direction::Left,
                    };
                    idx = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn leaf_value<F: FeatureLookup + ?Sized>(&self, x: &F) -> Result<&LeafValue, ModelError> {
        let idx = self.leaf_index(x)?;
        match &self.nodes[idx as usize] {
            TreeNode::Leaf { value, .. } => Ok(value),
            TreeNode::Split { .. } => unreachable!("routing ends at a leaf"),
        }
    }

    /// Leaves that may still be split, in index order.
    pub fn open_leaves(&self) -> Vec<NodeIndex> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                TreeNode::Leaf {
                    finalized: false, ..
                } => Some(i as NodeIndex),
                _ => None,
            })
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.open_leaves().is_empty()
    }

    /// Marks every leaf finalized.
    pub fn finalize(&mut self) {
        for n in &mut self.nodes {
            if let TreeNode::Leaf { finalized, .. } = n {
                *finalized = true;
            }
        }
    }

    pub(crate) fn set_finalized(&mut self, idx: NodeIndex, flag: bool) {
        if let Some(TreeNode::Leaf { finalized, .. }) = self.nodes.get_mut(idx as usize) {
            *finalized = flag;
        }
    }

    pub(crate) fn set_leaf_value(&mut self, idx: NodeIndex, new_value: LeafValue) {
        match &mut self.nodes[idx as usize] {
            TreeNode::Leaf { value, .. } => *value = new_value,
            TreeNode::Split { .. } => panic!("node {idx} is not a leaf"),
        }
    }

    /// Grows one layer: every keyed leaf becomes a split with two fresh open
    /// children, every other open leaf is finalized.
    pub fn grow_layer(
        &self,
        layer_splits: &BTreeMap<NodeIndex, SplitCandidate>,
        max_depth: u32,
    ) -> Result<DecisionTree, ModelError> {
        let depths = node_depths(&self.nodes)?;
        let dim = self.leaf_dim();
        for (&idx, cand) in layer_splits {
            match self.nodes.get(idx as usize) {
                None => return Err(ModelError::NodeOutOfRange(idx)),
                Some(TreeNode::Split { .. }) => return Err(ModelError::NotALeaf(idx)),
                Some(TreeNode::Leaf { finalized: true, .. }) => {
                    return Err(ModelError::SplitOnFinalizedLeaf(idx))
                }
                Some(TreeNode::Leaf { .. }) => {}
            }
            if depths[idx as usize] != self.depth {
                return Err(ModelError::InvalidTree(format!(
                    "leaf {idx} is not on the deepest layer"
                )));
            }
            if !cand.threshold.is_finite() {
                return Err(ModelError::InvalidTree("non-finite split threshold".into()));
            }
            for v in [&cand.left_value, &cand.right_value] {
                if v.dim() != dim {
                    return Err(ModelError::LeafDimension {
                        expected: dim,
                        found: v.dim(),
                    });
                }
            }
        }
        if !layer_splits.is_empty() && self.depth + 1 > max_depth {
            return Err(ModelError::DepthExceeded { max_depth });
        }

        let mut nodes = self.nodes.clone();
        for (i, node) in nodes.iter_mut().enumerate() {
            if let TreeNode::Leaf { finalized, .. } = node {
                if !layer_splits.contains_key(&(i as NodeIndex)) {
                    *finalized = true;
                }
            }
        }
        for (&idx, cand) in layer_splits {
            let left = nodes.len() as NodeIndex;
            nodes.push(TreeNode::Leaf {
                value: cand.left_value.clone(),
                finalized: false,
            });
            nodes.push(TreeNode::Leaf {
                value: cand.right_value.clone(),
                finalized: false,
            });
            nodes[idx as usize] = TreeNode::Split {
                feature: cand.feature,
                threshold: cand.threshold,
                default_direction: cand.default_direction,
                left,
                right: left + 1,
            };
        }
        let depth = if layer_splits.is_empty() {
            self.depth
        } else {
            self.depth + 1
        };
        Ok(DecisionTree { nodes, depth })
    }

    /// Structural checker: proper binary tree, breadth-first layer order,
    /// consistent depth, finite thresholds and leaf values, one leaf width.
    pub fn validate(&self) -> Result<(), ModelError> {
        let depths = node_depths(&self.nodes)?;
        let max = depths.iter().copied().max().unwrap_or(0);
        if max != self.depth {
            return Err(ModelError::InvalidTree(format!(
                "recorded depth {} but deepest leaf at {max}",
                self.depth
            )));
        }
        if depths.windows(2).any(|w| w[1] < w[0]) {
            return Err(ModelError::InvalidTree("nodes not in breadth-first order".into()));
        }
        let dim = self.leaf_dim();
        for node in &self.nodes {
            match node {
                TreeNode::Split { threshold, .. } if !threshold.is_finite() => {
                    return Err(ModelError::InvalidTree("non-finite split threshold".into()))
                }
                TreeNode::Leaf { value, .. } => {
                    if value.dim() != dim {
                        return Err(ModelError::LeafDimension {
                            expected: dim,
                            found: value.dim(),
                        });
                    }
                    if value.0.iter().any(|v| !v.is_finite()) {
                        return Err(ModelError::InvalidTree("non-finite leaf value".into()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Depth of every node, checking that the node graph is a tree rooted at 0
/// whose children always follow their parent.
pub(crate) fn node_depths(nodes: &[TreeNode]) -> Result<Vec<u32>, ModelError> {
    if nodes.is_empty() {
        return Err(ModelError::InvalidTree("tree has no nodes".into()));
    }
    let mut depth: Vec<Option<u32>> = vec![None; nodes.len()];
    depth[0] = Some(0);
    for (i, node) in nodes.iter().enumerate() {
        let d = depth[i].ok_or_else(|| ModelError::InvalidTree(format!("node {i} has no parent")))?;
        if let TreeNode::Split { left, right, .. } = node {
            for &c in [left, right] {
                let c = c as usize;
                if c <= i || c >= nodes.len() {
                    return Err(ModelError::InvalidTree(format!(
                        "node {i} has invalid child {c}"
                    )));
                }
                if depth[c].is_some() {
                    return Err(ModelError::InvalidTree(format!("node {c} has two parents")));
                }
                depth[c] = Some(d + 1);
            }
        }
    }
    Ok(depth.into_iter().map(|d| d.unwrap()).collect())
}
