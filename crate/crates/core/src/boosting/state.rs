use std::collections::{BTreeMap, BTreeSet};

use super::sampling::{round_rng, sample_dropout, sample_examples, sample_features, DropoutDecision};
use super::stats::Contribution;
use super::{BoostConfig, ConfigError, GrowthMode, Pruning, TrainError};
use crate::data::Batch;
use crate::histogram::{
    best_split_across_features, leaf_value, post_prune, GradStats, SplitCandidate, SplitRecord,
};
use crate::losses::{GradHess, Objective};
use crate::tree_model::{
    DecisionTree, FeatureId, GrowingMetadata, LeafValue, ModelError, NodeIndex, TreeEnsemble,
    TreeNode,
};

/// Tree multipliers tried by line search, in increasing order.
pub const LINE_SEARCH_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// An open leaf of an active tree: (tree index, node index).
pub type NodeKey = (usize, NodeIndex);

/// Bookkeeping for the group of trees currently being grown.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveRound {
    pub index: u32,
    pub first_tree: usize,
    pub count: usize,
    /// Layers built so far in this round.
    pub layer_depth: u32,
    pub done: Vec<bool>,
    pub dropout: DropoutDecision,
    /// Features eligible for splits this round.
    pub features: Vec<FeatureId>,
    /// Gain and pre-split value of every split, per active tree.
    pub splits: Vec<BTreeMap<NodeIndex, SplitRecord>>,
}

impl ActiveRound {
    pub fn contains(&self, tree: usize) -> bool {
        tree >= self.first_tree && tree < self.first_tree + self.count
    }
}

/// Payload of the model resource.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub ensemble: TreeEnsemble,
    pub round: Option<ActiveRound>,
    pub rounds_completed: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerReport {
    pub splits: usize,
    pub round_finished: bool,
    pub finished_trees: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlushOutcome {
    /// Boundaries were computed; no statistics could be bucketized yet.
    WarmUp,
    Layer(LayerReport),
}

/// Scores used for gradient computation: every tree except the dropped
/// ones, and except the active group unless growing layer by layer.
fn growth_scores<F: crate::tree_model::FeatureLookup + ?Sized>(
    ensemble: &TreeEnsemble,
    x: &F,
    mode: GrowthMode,
    dropout: &DropoutDecision,
    active_from: Option<usize>,
) -> Result<Vec<f64>, ModelError> {
    ensemble.predict_filtered(x, |t| {
        !dropout.dropped.contains(&t)
            && (mode == GrowthMode::LayerByLayer || active_from.map_or(true, |a| t < a))
    })
}

/// Per-example derivatives at the predictions that drive growth.
pub fn compute_gradients_for_growth(
    ensemble: &TreeEnsemble,
    batch: &Batch,
    objective: &Objective,
    mode: GrowthMode,
    dropout: &DropoutDecision,
    active_from: Option<usize>,
) -> Result<Vec<GradHess>, TrainError> {
    batch
        .examples
        .iter()
        .map(|ex| {
            let scores = growth_scores(ensemble, &ex.features, mode, dropout, active_from)?;
            Ok(objective.example_grad_hess(&scores, ex.label)?)
        })
        .collect()
}

/// Weighted batch loss of the ensemble with `tree` reweighted to each
/// candidate `learning_rate * m`; returns the minimizer, preferring the
/// smaller weight on ties. Trees in `exclude` do not contribute.
pub fn line_search_weight(
    ensemble: &TreeEnsemble,
    tree: usize,
    exclude: &BTreeSet<usize>,
    batch: &Batch,
    objective: &Objective,
    learning_rate: f64,
) -> Result<f64, TrainError> {
    let dim = ensemble.score_dim();
    let mut base = Vec::with_capacity(batch.len());
    let mut unit = Vec::with_capacity(batch.len());
    for ex in &batch.examples {
        base.push(ensemble.predict_filtered(&ex.features, |t| t != tree && !exclude.contains(&t))?);
        let mut u = vec![0.0; dim];
        ensemble.add_tree_contribution(tree, 1.0, &ex.features, &mut u)?;
        unit.push(u);
    }
    let mut best = (f64::INFINITY, learning_rate);
    for m in LINE_SEARCH_MULTIPLIERS {
        let w = learning_rate * m;
        let mut loss = 0.0;
        let mut scores = vec![0.0; dim];
        for (i, ex) in batch.examples.iter().enumerate() {
            for k in 0..dim {
                scores[k] = base[i][k] + w * unit[i][k];
            }
            loss += ex.weight * objective.example_loss(&scores, ex.label)?;
        }
        if loss < best.0 {
            best = (loss, w);
        }
    }
    Ok(best.1)
}

/// Growth rules bound to one configuration and feature space.
#[derive(Debug, Clone)]
pub struct Engine {
    config: BoostConfig,
    objective: Objective,
    num_features: usize,
}

impl Engine {
    pub fn new(config: BoostConfig, num_features: usize) -> Result<Self, ConfigError> {
        config.validate()?;
        let objective = config.objective()?;
        Ok(Self {
            config,
            objective,
            num_features,
        })
    }

    pub fn config(&self) -> &BoostConfig {
        &self.config
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn initial_state(&self) -> ModelState {
        let ensemble = TreeEnsemble::new(self.config.num_classes, self.config.multiclass)
            .expect("validated configuration");
        self.resume_state(ensemble, 0)
    }

    /// State that continues boosting after the committed trees of
    /// `ensemble` (warm restart).
    pub fn resume_state(&self, mut ensemble: TreeEnsemble, rounds_completed: u32) -> ModelState {
        ensemble.growing = GrowingMetadata::default();
        let mut state = ModelState {
            ensemble,
            round: None,
            rounds_completed,
        };
        if rounds_completed < self.config.num_trees {
            self.start_round(&mut state);
        }
        state
    }

    pub fn is_complete(&self, state: &ModelState) -> bool {
        state.round.is_none() && state.rounds_completed >= self.config.num_trees
    }

    fn start_round(&self, state: &mut ModelState) {
        let index = state.rounds_completed;
        let mut rng = round_rng(self.config.seed, index);
        let first_tree = state.ensemble.len();
        let dropout = sample_dropout(first_tree, self.config.dropout, &mut rng);
        let features = sample_features(self.num_features, self.config.feature_fraction, &mut rng);
        let count = self.config.trees_per_round();
        let dim = state.ensemble.leaf_dim();
        for _ in 0..count {
            state
                .ensemble
                .push_tree(
                    DecisionTree::new_leaf(LeafValue::zeros(dim)),
                    self.config.learning_rate,
                )
                .expect("fresh tree matches ensemble");
        }
        state.ensemble.growing = GrowingMetadata {
            active_tree_index: Some(first_tree),
            active_layer_depth: 0,
        };
        state.round = Some(ActiveRound {
            index,
            first_tree,
            count,
            layer_depth: 0,
            done: vec![false; count],
            dropout,
            features,
            splits: vec![BTreeMap::new(); count],
        });
    }

    /// Open leaves of the unfinished active trees in (tree, node) order.
    /// Histograms are indexed by position in this list.
    pub fn node_keys(&self, state: &ModelState) -> Vec<NodeKey> {
        let Some(round) = &state.round else {
            return Vec::new();
        };
        let mut keys = Vec::new();
        for i in 0..round.count {
            if round.done[i] {
                continue;
            }
            let t = round.first_tree + i;
            for leaf in state.ensemble.trees()[t].open_leaves() {
                keys.push((t, leaf));
            }
        }
        keys
    }

    pub fn sampled_features<'a>(&self, state: &'a ModelState) -> &'a [FeatureId] {
        state.round.as_ref().map_or(&[], |r| r.features.as_slice())
    }

    /// Routes the (bagged) examples of a batch to the open leaves they
    /// reach and pairs each with its derivative for that tree.
    pub fn contributions(
        &self,
        state: &ModelState,
        batch: &Batch,
    ) -> Result<Vec<Contribution>, TrainError> {
        let Some(round) = &state.round else {
            return Ok(Vec::new());
        };
        let keys = self.node_keys(state);
        let key_index: BTreeMap<NodeKey, usize> =
            keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let ensemble = &state.ensemble;
        let kept = sample_examples(batch, self.config.example_fraction, self.config.seed);
        let mut out = Vec::with_capacity(kept.len() * round.count);
        for i in kept {
            let ex = &batch.examples[i];
            let scores = growth_scores(
                ensemble,
                &ex.features,
                self.config.mode,
                &round.dropout,
                Some(round.first_tree),
            )?;
            let gh = self.objective.example_grad_hess(&scores, ex.label)?;
            for j in 0..round.count {
                if round.done[j] {
                    continue;
                }
                let t = round.first_tree + j;
                let leaf = ensemble.trees()[t].leaf_index(&ex.features)?;
                let Some(&node) = key_index.get(&(t, leaf)) else {
                    continue;
                };
                let (g, h) = match ensemble.class_of(t) {
                    Some(c) => (vec![gh.gradient[c]], vec![gh.hessian[c]]),
                    None => (gh.gradient.clone(), gh.hessian.clone()),
                };
                out.push(Contribution {
                    example: i,
                    node,
                    g,
                    h,
                    weight: ex.weight,
                });
            }
        }
        Ok(out)
    }

    /// Grows one layer from per-key split candidates (one entry per eligible
    /// feature, in feature order) and per-key totals. Finishing the round
    /// runs pruning, line search on `line_search_batch` and the dropout
    /// commit, then opens the next round.
    pub fn apply_layer(
        &self,
        state: &mut ModelState,
        per_key: &[(Vec<Option<SplitCandidate>>, GradStats)],
        line_search_batch: Option<&Batch>,
    ) -> Result<LayerReport, TrainError> {
        let keys = self.node_keys(state);
        if keys.len() != per_key.len() {
            return Err(TrainError::Schema(format!(
                "{} node statistics for {} open leaves",
                per_key.len(),
                keys.len()
            )));
        }
        let cfg = &self.config;
        let reg = cfg.reg;
        let layered = cfg.mode == GrowthMode::LayerByLayer;
        let round = state.round.as_mut().expect("active round");
        let first_layer = round.layer_depth == 0;

        let mut by_tree: BTreeMap<usize, BTreeMap<NodeIndex, SplitCandidate>> = BTreeMap::new();
        let mut root_values: BTreeMap<usize, LeafValue> = BTreeMap::new();
        let mut report = LayerReport::default();
        for (&(t, leaf), (cands, totals)) in keys.iter().zip(per_key) {
            let current = match state.ensemble.trees()[t].node(leaf) {
                Some(TreeNode::Leaf { value, .. }) => value.clone(),
                _ => unreachable!("keys name open leaves"),
            };
            let node_value = if first_layer {
                current.add(&leaf_value(totals, &reg))
            } else {
                current.clone()
            };
            let slot = t - round.first_tree;
            match best_split_across_features(cands.iter().cloned()) {
                Some(mut c) => {
                    if layered {
                        c.left_value = current.add(&c.left_value);
                        c.right_value = current.add(&c.right_value);
                    }
                    round.splits[slot].insert(
                        leaf,
                        SplitRecord {
                            gain: c.gain,
                            node_value,
                        },
                    );
                    by_tree.entry(t).or_default().insert(leaf, c);
                    report.splits += 1;
                }
                None if first_layer => {
                    root_values.insert(t, node_value);
                }
                None => {}
            }
        }

        for j in 0..round.count {
            if round.done[j] {
                continue;
            }
            let t = round.first_tree + j;
            let splits = by_tree.remove(&t).unwrap_or_default();
            let mut tree = state.ensemble.trees()[t].grow_layer(&splits, cfg.max_depth)?;
            if let Some(v) = root_values.remove(&t) {
                tree.set_leaf_value(0, v);
            }
            if round.layer_depth + 1 >= cfg.max_depth || tree.is_complete() {
                round.done[j] = true;
                report.finished_trees.push(t);
            }
            *state.ensemble.tree_mut(t) = tree;
        }
        round.layer_depth += 1;
        state.ensemble.growing.active_layer_depth = round.layer_depth;

        if round.done.iter().all(|d| *d) {
            self.finish_round(state, line_search_batch)?;
            report.round_finished = true;
        }
        Ok(report)
    }

    fn finish_round(
        &self,
        state: &mut ModelState,
        line_search_batch: Option<&Batch>,
    ) -> Result<(), TrainError> {
        let cfg = &self.config;
        let round = state.round.take().expect("active round");
        let trees = round.first_tree..round.first_tree + round.count;
        for (j, t) in trees.clone().enumerate() {
            let mut tree = state.ensemble.trees()[t].clone();
            tree.finalize();
            if cfg.pruning == Pruning::Post {
                tree = post_prune(&tree, &round.splits[j])?;
            }
            *state.ensemble.tree_mut(t) = tree;
        }
        if cfg.line_search {
            if let Some(batch) = line_search_batch {
                for t in trees.clone() {
                    let w = line_search_weight(
                        &state.ensemble,
                        t,
                        &round.dropout.dropped,
                        batch,
                        &self.objective,
                        cfg.learning_rate,
                    )?;
                    state.ensemble.set_weight(t, w);
                }
            }
        }
        let k = round.dropout.dropped.len() as f64;
        if k > 0.0 {
            for t in trees {
                let w = state.ensemble.tree_weights()[t] * round.dropout.normalization;
                state.ensemble.set_weight(t, w);
            }
            for &t in &round.dropout.dropped {
                let w = state.ensemble.tree_weights()[t] * k / (k + 1.0);
                state.ensemble.set_weight(t, w);
            }
        }
        state.ensemble.growing = GrowingMetadata::default();
        state.rounds_completed += 1;
        if state.rounds_completed < cfg.num_trees {
            self.start_round(state);
        }
        Ok(())
    }
}
