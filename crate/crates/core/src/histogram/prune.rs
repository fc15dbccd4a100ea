use std::collections::BTreeMap;

use crate::tree_model::{DecisionTree, LeafValue, ModelError, NodeIndex, TreeNode};

/// What the grower knew about a split when it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecord {
    pub gain: f64,
    /// Value the node held as a leaf before it was split.
    pub node_value: LeafValue,
}

/// Bottom-up pruning: a split whose subtree gain (its own gain plus the
/// gains of surviving descendant splits) is not positive collapses back to
/// a leaf holding its pre-split value. Every split needs a record.
pub fn post_prune(
    tree: &DecisionTree,
    records: &BTreeMap<NodeIndex, SplitRecord>,
) -> Result<DecisionTree, ModelError> {
    let nodes = tree.nodes();
    let mut acc = vec![0.0f64; nodes.len()];
    let mut collapsed = vec![false; nodes.len()];
    // children always follow their parent, so reverse index order is
    // bottom-up
    for i in (0..nodes.len()).rev() {
        if let TreeNode::Split { left, right, .. } = &nodes[i] {
            let rec = records.get(&(i as NodeIndex)).ok_or_else(|| {
                ModelError::InvalidTree(format!("split {i} has no recorded gain"))
            })?;
            let total = rec.gain + acc[*left as usize] + acc[*right as usize];
            if total <= 0.0 {
                collapsed[i] = true;
                acc[i] = 0.0;
            } else {
                acc[i] = total;
            }
        }
    }
    if !collapsed.iter().any(|c| *c) {
        return Ok(tree.clone());
    }

    // Re-emit breadth-first, skipping everything under a collapsed split.
    let mut out: Vec<TreeNode> = Vec::with_capacity(nodes.len());
    let mut queue = std::collections::VecDeque::from([0usize]);
    let mut split_slots: Vec<usize> = Vec::new();
    let mut new_index = vec![u32::MAX; nodes.len()];
    while let Some(i) = queue.pop_front() {
        new_index[i] = out.len() as NodeIndex;
        match &nodes[i] {
            TreeNode::Split { .. } if collapsed[i] => out.push(TreeNode::Leaf {
                value: records[&(i as NodeIndex)].node_value.clone(),
                finalized: true,
            }),
            TreeNode::Split { left, right, .. } => {
                out.push(nodes[i].clone());
                split_slots.push(out.len() - 1);
                queue.push_back(*left as usize);
                queue.push_back(*right as usize);
            }
            leaf => out.push(leaf.clone()),
        }
    }
    for pos in split_slots {
        if let TreeNode::Split { left, right, .. } = &mut out[pos] {
            *left = new_index[*left as usize];
            *right = new_index[*right as usize];
        }
    }
    DecisionTree::from_nodes(out)
}
