use super::state::{Engine, FlushOutcome, ModelState};
use super::stats::{
    batch_quantile_stats, build_histogram, combine_flushes, flush_shard, ExampleCounter,
    QuantileAcc,
};
use super::{BoostConfig, Pruning, QuantileCarry, TrainError};
use crate::data::{Batch, BatchSource, DataError};
use crate::histogram::GradHessHistogram;
use crate::tree_model::TreeEnsemble;

/// Single-process reference: one worker, one shard owning every feature.
/// The distributed runtime reproduces it exactly on its accepted pushes.
#[derive(Debug, Clone)]
pub struct SequentialTrainer {
    engine: Engine,
    state: ModelState,
    quantiles: QuantileAcc,
    grad: Option<GradHessHistogram>,
    counter: ExampleCounter,
}

impl SequentialTrainer {
    pub fn new(config: BoostConfig, num_features: usize) -> Result<Self, TrainError> {
        let engine = Engine::new(config, num_features)?;
        let state = engine.initial_state();
        Ok(Self::from_parts(engine, state))
    }

    pub(crate) fn from_parts(engine: Engine, state: ModelState) -> Self {
        Self {
            engine,
            state,
            quantiles: QuantileAcc::default(),
            grad: None,
            counter: ExampleCounter::default(),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn ensemble(&self) -> &TreeEnsemble {
        &self.state.ensemble
    }

    pub fn into_ensemble(self) -> TreeEnsemble {
        self.state.ensemble
    }

    pub fn is_complete(&self) -> bool {
        self.engine.is_complete(&self.state)
    }

    pub fn push_quantiles(&mut self, batch: &Batch) -> Result<(), TrainError> {
        let cfg = self.engine.config();
        let stats = batch_quantile_stats(batch, self.engine.num_features(), cfg.epsilon)?;
        self.quantiles.push(&stats);
        Ok(())
    }

    /// Derivatives, bucketing and aggregation with the current boundaries,
    /// plus the example count.
    pub fn push_gradients(&mut self, batch: &Batch) -> Result<(), TrainError> {
        let contributions = self.engine.contributions(&self.state, batch)?;
        let layout = self.quantiles.layout(self.engine.sampled_features(&self.state));
        let hist = build_histogram(
            &contributions,
            batch,
            &layout,
            &self.quantiles.boundaries,
            self.state.ensemble.leaf_dim(),
            self.engine.node_keys(&self.state).len(),
        );
        match &mut self.grad {
            Some(acc) => acc.merge(&hist).map_err(|e| TrainError::Schema(e.to_string()))?,
            None => self.grad = Some(hist),
        }
        self.counter.add(batch.len() as u64, batch.total_weight());
        Ok(())
    }

    pub fn ready(&self) -> bool {
        let cfg = self.engine.config();
        !self.is_complete() && self.counter.reached(cfg.count_gating, cfg.examples_per_layer)
    }

    pub fn flush(&mut self, line_search_batch: Option<&Batch>) -> Result<FlushOutcome, TrainError> {
        let cfg = self.engine.config();
        let num_keys = self.engine.node_keys(&self.state).len();
        let shard = flush_shard(
            &mut self.quantiles,
            &mut self.grad,
            &mut self.counter,
            &cfg.reg,
            cfg.pruning == Pruning::Post,
            cfg.num_buckets,
        );
        let Some(layer) = combine_flushes(&[shard], num_keys, self.state.ensemble.leaf_dim())
        else {
            return Ok(FlushOutcome::WarmUp);
        };
        let report = self
            .engine
            .apply_layer(&mut self.state, &layer, line_search_batch)?;
        if report.round_finished && self.engine.config().quantile_carry == QuantileCarry::PerTree {
            self.quantiles.summaries.clear();
        }
        Ok(FlushOutcome::Layer(report))
    }

    /// One full worker iteration followed by the chief's readiness check.
    pub fn step(&mut self, batch: &Batch) -> Result<Option<FlushOutcome>, TrainError> {
        self.push_quantiles(batch)?;
        self.push_gradients(batch)?;
        if self.ready() {
            return self.flush(Some(batch)).map(Some);
        }
        Ok(None)
    }
}

/// Trains on `source` until every round is built. Running out of data
/// early returns the ensemble as grown so far.
pub fn train(
    config: &BoostConfig,
    num_features: usize,
    source: &mut dyn BatchSource,
) -> Result<TreeEnsemble, TrainError> {
    let mut trainer = SequentialTrainer::new(config.clone(), num_features)?;
    let mut seen = false;
    while !trainer.is_complete() {
        let Some(batch) = source.next_batch()? else {
            if !seen {
                return Err(DataError::Empty.into());
            }
            log::warn!(
                "data exhausted after {} of {} rounds",
                trainer.state().rounds_completed,
                config.num_trees
            );
            break;
        };
        seen = true;
        trainer.step(&batch)?;
    }
    Ok(trainer.into_ensemble())
}
