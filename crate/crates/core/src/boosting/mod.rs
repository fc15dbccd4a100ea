//! Ensemble growth: standard and layer-by-layer modes, shrinkage, line
//! search, dropout and stochastic sampling.

mod sampling;
mod state;
mod stats;
mod trainer;

pub use sampling::{
    mix_seed, round_rng, sample_dropout, sample_examples, sample_features, DropoutDecision,
};
pub use state::{
    compute_gradients_for_growth, line_search_weight, ActiveRound, Engine, FlushOutcome,
    LayerReport, ModelState, NodeKey, LINE_SEARCH_MULTIPLIERS,
};
pub use stats::{
    batch_quantile_stats, build_histogram, Contribution, ExampleCounter, QuantileAcc,
};
pub(crate) use stats::{combine_flushes, flush_shard, ShardFlush};
pub use trainer::{train, SequentialTrainer};

use thiserror::Error;

use crate::data::DataError;
use crate::histogram::RegParams;
use crate::losses::{LossError, LossSpec, Objective};
use crate::tree_model::{ModelError, MulticlassStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthMode {
    Standard,
    LayerByLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pruning {
    Pre,
    Post,
}

/// What happens to the quantile summaries at a flush.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantileCarry {
    /// Carried across flushes, cleared when a new round of trees starts.
    PerTree,
    Always,
}

/// Quantity compared against `examples_per_layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountGating {
    Examples,
    Weight,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Schema(String),
}

#[derive(Debug, Clone)]
pub struct BoostConfig {
    pub mode: GrowthMode,
    /// Boosting rounds; one-vs-rest grows one tree per class each round.
    pub num_trees: u32,
    pub max_depth: u32,
    pub learning_rate: f64,
    pub examples_per_layer: u64,
    pub dropout: f64,
    pub feature_fraction: f64,
    pub example_fraction: f64,
    pub line_search: bool,
    pub reg: RegParams,
    pub pruning: Pruning,
    pub seed: u64,
    pub loss: LossSpec,
    pub multiclass: MulticlassStrategy,
    pub num_classes: u32,
    pub num_buckets: usize,
    pub epsilon: f64,
    pub quantile_carry: QuantileCarry,
    pub count_gating: CountGating,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            mode: GrowthMode::LayerByLayer,
            num_trees: 10,
            max_depth: 3,
            learning_rate: 0.1,
            examples_per_layer: 1000,
            dropout: 0.0,
            feature_fraction: 1.0,
            example_fraction: 1.0,
            line_search: false,
            reg: RegParams::default(),
            pruning: Pruning::Pre,
            seed: 0,
            loss: LossSpec::least_squares(),
            multiclass: MulticlassStrategy::None,
            num_classes: 1,
            num_buckets: 100,
            epsilon: 0.01,
            quantile_carry: QuantileCarry::PerTree,
            count_gating: CountGating::Examples,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.max_depth == 0 {
            return bad("max_depth must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning_rate {} outside (0, 1]", self.learning_rate));
        }
        if self.examples_per_layer == 0 {
            return bad("examples_per_layer must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("feature_fraction", self.feature_fraction),
            ("example_fraction", self.example_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} {v} outside (0, 1]"));
            }
        }
        let r = &self.reg;
        for (name, v) in [
            ("l1", r.l1),
            ("l2", r.l2),
            ("tree_complexity", r.tree_complexity),
            ("min_node_weight", r.min_node_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if self.num_buckets == 0 {
            return bad("num_buckets must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon {} outside (0, 1)", self.epsilon));
        }
        self.objective()?;
        Ok(())
    }

    pub fn objective(&self) -> Result<Objective, ConfigError> {
        Ok(Objective::new(
            self.loss.clone(),
            self.multiclass,
            self.num_classes,
        )?)
    }

    /// Trees grown per boosting round.
    pub fn trees_per_round(&self) -> usize {
        match self.multiclass {
            MulticlassStrategy::OneVsRest => self.num_classes as usize,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests;
