use std::sync::{Arc, RwLock};

use super::shard::{partition_features, PsShard};
use super::RuntimeError;
use crate::boosting::{
    batch_quantile_stats, build_histogram, combine_flushes, flush_shard, BoostConfig, Engine,
    FlushOutcome, ModelState, Pruning, QuantileCarry, ShardFlush,
};
use crate::data::Batch;
use crate::tree_model::{StampToken, StampedResource, TreeEnsemble, WriteOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationOutcome {
    Accepted,
    /// A flush landed mid-iteration; the batch was dropped.
    DiscardedStale,
    /// Training had already finished.
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuildOutcome {
    NotReady,
    Built {
        /// Stamp after the flush.
        stamp: StampToken,
        examples: u64,
        weight: f64,
        flush: FlushOutcome,
    },
}

/// Model resource plus parameter-server shards, all under one stamp.
///
/// Pushes hold the phase gate shared and the chief's flush holds it
/// exclusively, so a multi-shard push is never split by a flush.
#[derive(Debug)]
pub struct Cluster {
    engine: Engine,
    model: StampedResource<ModelState>,
    shards: Vec<PsShard>,
    gate: RwLock<()>,
}

impl Cluster {
    pub fn new(
        config: BoostConfig,
        num_features: usize,
        num_shards: usize,
    ) -> Result<Self, RuntimeError> {
        if num_shards == 0 {
            return Err(RuntimeError::Config("need at least one shard".into()));
        }
        let engine = Engine::new(config, num_features).map_err(crate::boosting::TrainError::from)?;
        let state = engine.initial_state();
        let shards = partition_features(num_features, num_shards)
            .into_iter()
            .enumerate()
            .map(|(k, owned)| PsShard::new(k, owned))
            .collect();
        Ok(Self::from_parts(engine, state, StampToken(0), shards))
    }

    pub fn from_parts(
        engine: Engine,
        state: ModelState,
        stamp: StampToken,
        shards: Vec<PsShard>,
    ) -> Self {
        Self {
            engine,
            model: StampedResource::with_stamp(stamp, state),
            shards,
            gate: RwLock::new(()),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn shards(&self) -> &[PsShard] {
        &self.shards
    }

    pub fn read_model(&self) -> (StampToken, Arc<ModelState>) {
        self.model.read()
    }

    pub fn stamp(&self) -> StampToken {
        self.model.stamp()
    }

    pub fn is_complete(&self) -> bool {
        self.engine.is_complete(&self.model.read().1)
    }

    pub fn ensemble(&self) -> TreeEnsemble {
        self.model.read().1.ensemble.clone()
    }

    /// Runs `f` on a consistent view: no push is half applied and no flush
    /// is in progress.
    pub fn snapshot<R>(&self, f: impl FnOnce(StampToken, &ModelState, &[PsShard]) -> R) -> R {
        let _exclusive = self.gate.write().unwrap();
        let (stamp, state) = self.model.read();
        f(stamp, &state, &self.shards)
    }

    /// Local sketches of the batch, split by shard ownership.
    pub fn push_quantiles(
        &self,
        stamp: StampToken,
        batch: &Batch,
    ) -> Result<WriteOutcome, RuntimeError> {
        let cfg = self.engine.config();
        let stats = batch_quantile_stats(batch, self.engine.num_features(), cfg.epsilon)?;
        let _shared = self.gate.read().unwrap();
        for shard in &self.shards {
            let mine = shard.select(&stats);
            if !shard.quantiles.write(stamp, |acc| acc.push(&mine)).is_accepted() {
                return Ok(WriteOutcome::RejectedStale);
            }
        }
        Ok(WriteOutcome::Accepted)
    }

    /// Fetches boundaries at `stamp`, computes derivatives against `model`,
    /// bucketizes and pushes one histogram per shard with the example count.
    pub fn push_gradients(
        &self,
        stamp: StampToken,
        model: &ModelState,
        batch: &Batch,
    ) -> Result<WriteOutcome, RuntimeError> {
        let mut views = Vec::with_capacity(self.shards.len());
        for shard in &self.shards {
            let (s, acc) = shard.quantiles.read();
            if s != stamp {
                return Ok(WriteOutcome::RejectedStale);
            }
            views.push(acc);
        }
        let contributions = self.engine.contributions(model, batch)?;
        let sampled = self.engine.sampled_features(model);
        let num_nodes = self.engine.node_keys(model).len();
        let dim = model.ensemble.leaf_dim();
        let hists: Vec<_> = self
            .shards
            .iter()
            .zip(&views)
            .map(|(shard, acc)| {
                let layout = acc.layout(&shard.owned_of(sampled));
                build_histogram(&contributions, batch, &layout, &acc.boundaries, dim, num_nodes)
            })
            .collect();
        let (n, w) = (batch.len() as u64, batch.total_weight());

        let _shared = self.gate.read().unwrap();
        for (shard, hist) in self.shards.iter().zip(hists) {
            let out = shard.grad.write(stamp, |g| match g {
                Some(acc) => acc.merge(&hist).expect("one layout per stamp"),
                None => *g = Some(hist),
            });
            if !out.is_accepted() {
                return Ok(WriteOutcome::RejectedStale);
            }
            shard.counter.write(stamp, |c| c.add(n, w));
        }
        Ok(WriteOutcome::Accepted)
    }

    /// Both push phases back to back.
    pub fn worker_iteration(&self, batch: &Batch) -> Result<IterationOutcome, RuntimeError> {
        let (stamp, model) = self.read_model();
        if self.engine.is_complete(&model) {
            return Ok(IterationOutcome::Complete);
        }
        if !self.push_quantiles(stamp, batch)?.is_accepted()
            || !self.push_gradients(stamp, &model, batch)?.is_accepted()
        {
            return Ok(IterationOutcome::DiscardedStale);
        }
        Ok(IterationOutcome::Accepted)
    }

    /// The chief's gate: flushes every shard and builds a layer once the
    /// example count at the current stamp reaches the threshold (or, with
    /// `force`, whenever anything was counted).
    pub fn chief_check_and_build(
        &self,
        line_search_batch: Option<&Batch>,
        force: bool,
    ) -> Result<BuildOutcome, RuntimeError> {
        let _exclusive = self.gate.write().unwrap();
        let cfg = self.engine.config();
        let (stamp, state) = self.model.read();
        if self.engine.is_complete(&state) {
            return Ok(BuildOutcome::NotReady);
        }
        let (cs, counted) = self.shards[0].counter.read();
        if cs != stamp {
            return Err(RuntimeError::Protocol(format!(
                "shard at stamp {cs}, model at {stamp}"
            )));
        }
        let counted = *counted;
        let ready = counted.reached(cfg.count_gating, cfg.examples_per_layer)
            || (force && counted.count > 0);
        if !ready {
            return Ok(BuildOutcome::NotReady);
        }
        let num_keys = self.engine.node_keys(&state).len();
        let dim = state.ensemble.leaf_dim();
        drop(state);

        let stale = |e: crate::tree_model::StaleFlush| RuntimeError::Protocol(e.to_string());
        let mut flushes: Vec<ShardFlush> = Vec::with_capacity(self.shards.len());
        for shard in &self.shards {
            let f = shard
                .quantiles
                .flush(stamp, |acc| {
                    shard.grad.flush(stamp, |g| {
                        shard.counter.flush(stamp, |c| {
                            flush_shard(
                                acc,
                                g,
                                c,
                                &cfg.reg,
                                cfg.pruning == Pruning::Post,
                                cfg.num_buckets,
                            )
                        })
                    })
                })
                .map_err(stale)?
                .map_err(stale)?
                .map_err(stale)?;
            flushes.push(f);
        }
        let layer = combine_flushes(&flushes, num_keys, dim);
        let mut result = Ok(FlushOutcome::WarmUp);
        self.model
            .flush(stamp, |st| {
                if let Some(layer) = &layer {
                    result = self
                        .engine
                        .apply_layer(st, layer, line_search_batch)
                        .map(FlushOutcome::Layer);
                }
            })
            .map_err(stale)?;
        let flush = result?;
        let next = stamp.next();
        if let FlushOutcome::Layer(r) = &flush {
            if r.round_finished && cfg.quantile_carry == QuantileCarry::PerTree {
                for shard in &self.shards {
                    shard.quantiles.write(next, |a| a.summaries.clear());
                }
            }
        }
        Ok(BuildOutcome::Built {
            stamp: next,
            examples: counted.count,
            weight: counted.weight,
            flush,
        })
    }
}
