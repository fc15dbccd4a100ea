//! Versioned binary ensemble format.
//!
//! ```text
//! "TFBT" | version u32 | stamp i64 | num_classes u32 | strategy u8 | num_trees u32
//! per tree: weight f64 | class_assignment u32 | num_nodes u32 | nodes...
//!   split: tag 0 | feature u32 | threshold f64 | default u8 | left u32 | right u32
//!   leaf:  tag 1 | value count u32 | values f64...
//! ```
//!
//! All numerics are little-endian. Loaded trees have every leaf finalized.

use super::ensemble::{MulticlassStrategy, TreeEnsemble};
use super::stamped::StampToken;
use super::tree::{DecisionTree, Direction, LeafValue, TreeNode};
use crate::codec::{ByteReader, ByteWriter, LoadError};

pub const MAGIC: &[u8; 4] = b"TFBT";
pub const VERSION: u32 = 1;

const TAG_SPLIT: u8 = 0;
const TAG_LEAF: u8 = 1;

pub fn serialize_ensemble(ensemble: &TreeEnsemble, stamp: StampToken) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.i64(stamp.0);
    w.u32(ensemble.num_classes());
    w.u8(ensemble.strategy().code());
    w.len_u32(ensemble.len());
    for (t, (tree, &weight)) in ensemble
        .trees()
        .iter()
        .zip(ensemble.tree_weights())
        .enumerate()
    {
        w.f64(weight);
        w.u32(ensemble.class_assignment(t));
        w.len_u32(tree.nodes().len());
        for node in tree.nodes() {
            match node {
                TreeNode::Split {
                    feature,
                    threshold,
                    default_direction,
                    left,
                    right,
                } => {
                    w.u8(TAG_SPLIT);
                    w.u32(*feature);
                    w.f64(*threshold);
                    w.u8(match default_direction {
                        Direction::Left => 0,
                        Direction::Right => 1,
                    });
                    w.u32(*left);
                    w.u32(*right);
                }
                TreeNode::Leaf { value, .. } => {
                    w.u8(TAG_LEAF);
                    w.f64s(value.scores());
                }
            }
        }
    }
    w.finish()
}

pub fn deserialize_ensemble(bytes: &[u8]) -> Result<(StampToken, TreeEnsemble), LoadError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let stamp = StampToken(r.i64()?);
    let num_classes = r.u32()?;
    let code = r.u8()?;
    let strategy = MulticlassStrategy::from_code(code)
        .ok_or_else(|| LoadError::Invalid(format!("unknown multiclass strategy {code}")))?;
    let mut ensemble =
        TreeEnsemble::new(num_classes, strategy).map_err(|e| LoadError::Invalid(e.to_string()))?;
    let num_trees = r.count(12)?;
    for t in 0..num_trees {
        let weight = r.f64()?;
        let class = r.u32()?;
        if class != ensemble.class_assignment(t) {
            return Err(LoadError::Invalid(format!(
                "tree {t} assigned to class {class}, expected {}",
                ensemble.class_assignment(t)
            )));
        }
        let num_nodes = r.count(5)?;
        let mut nodes = Vec::with_capacity(num_nodes);
        for _ in 0..num_nodes {
            let node = match r.u8()? {
                TAG_SPLIT => {
                    let feature = r.u32()?;
                    let threshold = r.f64()?;
                    let default_direction = match r.u8()? {
                        0 => Direction::Left,
                        1 => Direction::Right,
                        d => return Err(LoadError::Invalid(format!("bad default direction {d}"))),
                    };
                    TreeNode::Split {
                        feature,
                        threshold,
                        default_direction,
                        left: r.u32()?,
                        right: r.u32()?,
                    }
                }
                TAG_LEAF => TreeNode::Leaf {
                    value: LeafValue::new(r.f64s()?).map_err(|e| LoadError::Invalid(e.to_string()))?,
                    finalized: true,
                },
                tag => return Err(LoadError::Invalid(format!("unknown node tag {tag}"))),
            };
            nodes.push(node);
        }
        let tree = DecisionTree::from_nodes(nodes).map_err(|e| LoadError::Invalid(e.to_string()))?;
        ensemble
            .push_tree(tree, weight)
            .map_err(|e| LoadError::Invalid(e.to_string()))?;
    }
    r.finish()?;
    ensemble
        .validate()
        .map_err(|e| LoadError::Invalid(e.to_string()))?;
    Ok((stamp, ensemble))
}
