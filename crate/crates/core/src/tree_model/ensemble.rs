use std::collections::BTreeSet;

use super::tree::{DecisionTree, FeatureLookup};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MulticlassStrategy {
    None,
    OneVsRest,
    PerClassLeaves,
}

impl MulticlassStrategy {
    pub(crate) fn code(self) -> u8 {
        match self {
            MulticlassStrategy::None => 0,
            MulticlassStrategy::OneVsRest => 1,
            MulticlassStrategy::PerClassLeaves => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MulticlassStrategy::None),
            1 => Some(MulticlassStrategy::OneVsRest),
            2 => Some(MulticlassStrategy::PerClassLeaves),
            _ => None,
        }
    }
}

/// Marks a partially built tree group at the end of the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GrowingMetadata {
    /// Index of the first tree still under construction; the trees from
    /// here to the end are the active group (one tree, or one per class
    /// under one-vs-rest).
    pub active_tree_index: Option<usize>,
    pub active_layer_depth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    trees: Vec<DecisionTree>,
    tree_weights: Vec<f64>,
    num_classes: u32,
    strategy: MulticlassStrategy,
    pub growing: GrowingMetadata,
}

impl TreeEnsemble {
    pub fn new(num_classes: u32, strategy: MulticlassStrategy) -> Result<Self, ModelError> {
        match strategy {
            MulticlassStrategy::None if num_classes != 1 => Err(ModelError::InvalidEnsemble(
                format!("strategy none requires one class, got {num_classes}"),
            )),
            MulticlassStrategy::OneVsRest | MulticlassStrategy::PerClassLeaves
                if num_classes < 2 =>
            {
                Err(ModelError::InvalidEnsemble(format!(
                    "multiclass strategy requires at least two classes, got {num_classes}"
                )))
            }
            _ => Ok(Self {
                trees: Vec::new(),
                tree_weights: Vec::new(),
                num_classes,
                strategy,
                growing: GrowingMetadata::default(),
            }),
        }
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn strategy(&self) -> MulticlassStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn tree_weights(&self) -> &[f64] {
        &self.tree_weights
    }

    /// Width of every leaf value in this ensemble.
    pub fn leaf_dim(&self) -> usize {
        match self.strategy {
            MulticlassStrategy::PerClassLeaves => self.num_classes as usize,
            _ => 1,
        }
    }

    /// Length of a prediction vector.
    pub fn score_dim(&self) -> usize {
        match self.strategy {
            MulticlassStrategy::None => 1,
            _ => self.num_classes as usize,
        }
    }

    /// Class a tree contributes to under one-vs-rest.
    pub fn class_of(&self, tree: usize) -> Option<usize> {
        match self.strategy {
            MulticlassStrategy::OneVsRest => Some(tree % self.num_classes as usize),
            _ => None,
        }
    }

    pub(crate) fn class_assignment(&self, tree: usize) -> u32 {
        self.class_of(tree).unwrap_or(0) as u32
    }

    pub fn push_tree(&mut self, tree: DecisionTree, weight: f64) -> Result<(), ModelError> {
        if tree.leaf_dim() != self.leaf_dim() {
            return Err(ModelError::LeafDimension {
                expected: self.leaf_dim(),
                found: tree.leaf_dim(),
            });
        }
        if !weight.is_finite() {
            return Err(ModelError::InvalidEnsemble("non-finite tree weight".into()));
        }
        self.trees.push(tree);
        self.tree_weights.push(weight);
        Ok(())
    }

    pub(crate) fn tree_mut(&mut self, idx: usize) -> &mut DecisionTree {
        &mut self.trees[idx]
    }

    pub(crate) fn set_weight(&mut self, idx: usize, w: f64) {
        debug_assert!(w.is_finite());
        self.tree_weights[idx] = w;
    }

    /// Adds one tree's weighted contribution to `scores`.
    pub fn add_tree_contribution<F: FeatureLookup + ?Sized>(
        &self,
        tree: usize,
        weight: f64,
        x: &F,
        scores: &mut [f64],
    ) -> Result<(), ModelError> {
        let value = self.trees[tree].leaf_value(x)?;
        match self.strategy {
            MulticlassStrategy::OneVsRest => {
                scores[tree % self.num_classes as usize] += weight * value.0[0];
            }
            _ => {
                for (s, v) in scores.iter_mut().zip(&value.0) {
                    *s += weight * v;
                }
            }
        }
        Ok(())
    }

    /// Sum of the weighted leaf values of every tree for which `include`
    /// holds.
    pub fn predict_filtered<F: FeatureLookup + ?Sized>(
        &self,
        x: &F,
        include: impl Fn(usize) -> bool,
    ) -> Result<Vec<f64>, ModelError> {
        let mut scores = vec![0.0; self.score_dim()];
        for t in 0..self.trees.len() {
            if include(t) {
                self.add_tree_contribution(t, self.tree_weights[t], x, &mut scores)?;
            }
        }
        Ok(scores)
    }

    pub fn predict<F: FeatureLookup + ?Sized>(
        &self,
        x: &F,
        dropped: Option<&BTreeSet<usize>>,
    ) -> Result<Vec<f64>, ModelError> {
        match dropped {
            Some(d) => {
                if let Some(&bad) = d.iter().find(|&&t| t >= self.trees.len()) {
                    return Err(ModelError::InvalidEnsemble(format!(
                        "dropped tree {bad} does not exist"
                    )));
                }
                self.predict_filtered(x, |t| !d.contains(&t))
            }
            None => self.predict_filtered(x, |_| true),
        }
    }

    /// Concatenation with preserved weights.
    pub fn concat(&self, other: &TreeEnsemble) -> Result<TreeEnsemble, ModelError> {
        if self.num_classes != other.num_classes || self.strategy != other.strategy {
            return Err(ModelError::InvalidEnsemble("incompatible ensembles".into()));
        }
        if self.strategy == MulticlassStrategy::OneVsRest
            && self.trees.len() % self.num_classes as usize != 0
        {
            return Err(ModelError::InvalidEnsemble(
                "one-vs-rest prefix must hold whole rounds".into(),
            ));
        }
        let mut out = self.clone();
        out.growing = GrowingMetadata::default();
        for (t, w) in other.trees.iter().zip(&other.tree_weights) {
            out.push_tree(t.clone(), *w)?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.trees.len() != self.tree_weights.len() {
            return Err(ModelError::InvalidEnsemble("tree/weight count mismatch".into()));
        }
        if self.tree_weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::InvalidEnsemble("non-finite tree weight".into()));
        }
        if self.strategy == MulticlassStrategy::OneVsRest
            && self.trees.len() % self.num_classes as usize != 0
        {
            return Err(ModelError::InvalidEnsemble(
                "one-vs-rest tree count is not a multiple of the class count".into(),
            ));
        }
        for t in &self.trees {
            t.validate()?;
            if t.leaf_dim() != self.leaf_dim() {
                return Err(ModelError::LeafDimension {
                    expected: self.leaf_dim(),
                    found: t.leaf_dim(),
                });
            }
        }
        if let Some(a) = self.growing.active_tree_index {
            if a >= self.trees.len() {
                return Err(ModelError::InvalidEnsemble(
                    "active tree index past the end".into(),
                ));
            }
        }
        Ok(())
    }
}
