use std::collections::BTreeMap;

use super::{CountGating, TrainError};
use crate::data::Batch;
use crate::histogram::{
    best_split_for_feature, bucketize, GradHessHistogram, GradStats, HistogramLayout, RegParams,
    SplitCandidate,
};
use crate::quantile::QuantileSummary;
use crate::tree_model::FeatureId;

/// One example routed to one open leaf, with the derivative for that
/// leaf's tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub example: usize,
    /// Position of the leaf in the node key list.
    pub node: usize,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub weight: f64,
}

/// Quantile state of one shard: running summaries and the boundaries
/// computed at the last flush.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantileAcc {
    pub summaries: BTreeMap<FeatureId, QuantileSummary>,
    pub boundaries: BTreeMap<FeatureId, Vec<f64>>,
}

impl QuantileAcc {
    pub fn push(&mut self, stats: &BTreeMap<FeatureId, QuantileSummary>) {
        for (f, s) in stats {
            let merged = match self.summaries.get(f) {
                Some(cur) => cur.merge(s).expect("summaries share one epsilon"),
                None => s.clone(),
            };
            self.summaries.insert(*f, merged);
        }
    }

    pub fn recompute_boundaries(&mut self, num_buckets: usize) {
        for (f, s) in &self.summaries {
            if let Ok(b) = s.boundaries(num_buckets) {
                self.boundaries.insert(*f, b);
            }
        }
    }

    /// Histogram layout over `features` (increasing) restricted to those
    /// with boundaries.
    pub fn layout(&self, features: &[FeatureId]) -> HistogramLayout {
        let mut layout = HistogramLayout::default();
        for f in features {
            if let Some(b) = self.boundaries.get(f) {
                layout.features.push(*f);
                layout.num_buckets.push(b.len());
            }
        }
        layout
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExampleCounter {
    pub count: u64,
    pub weight: f64,
}

impl ExampleCounter {
    pub fn add(&mut self, count: u64, weight: f64) {
        self.count += count;
        self.weight += weight;
    }

    pub fn reached(&self, gating: CountGating, threshold: u64) -> bool {
        match gating {
            CountGating::Examples => self.count >= threshold,
            CountGating::Weight => self.weight >= threshold as f64,
        }
    }
}

/// Exact per-feature summaries of one batch. Missing values are skipped.
pub fn batch_quantile_stats(
    batch: &Batch,
    num_features: usize,
    epsilon: f64,
) -> Result<BTreeMap<FeatureId, QuantileSummary>, TrainError> {
    let mut values: BTreeMap<FeatureId, Vec<(f64, f64)>> = BTreeMap::new();
    for ex in &batch.examples {
        for &(f, v) in ex.features.entries() {
            if f as usize >= num_features {
                return Err(TrainError::Schema(format!(
                    "feature {f} outside the {num_features}-feature space"
                )));
            }
            values.entry(f).or_default().push((v, ex.weight));
        }
    }
    let mut out = BTreeMap::new();
    for (f, vs) in values {
        let s = QuantileSummary::from_batch(epsilon, &vs)
            .map_err(|e| TrainError::Schema(format!("feature {f}: {e}")))?;
        if !s.is_empty() {
            out.insert(f, s);
        }
    }
    Ok(out)
}

/// Histogram of `contributions` over `layout`, bucketized with `boundaries`.
pub fn build_histogram(
    contributions: &[Contribution],
    batch: &Batch,
    layout: &HistogramLayout,
    boundaries: &BTreeMap<FeatureId, Vec<f64>>,
    dim: usize,
    num_nodes: usize,
) -> GradHessHistogram {
    let mut hist = GradHessHistogram::new(dim, num_nodes, layout.clone());
    let mut cached: Option<(usize, Vec<Option<usize>>)> = None;
    for c in contributions {
        if cached.as_ref().map_or(true, |(i, _)| *i != c.example) {
            let ex = &batch.examples[c.example];
            let buckets = layout
                .features
                .iter()
                .map(|f| {
                    bucketize(ex.features.get(*f), &boundaries[f]).expect("non-empty boundaries")
                })
                .collect();
            cached = Some((c.example, buckets));
        }
        let buckets = &cached.as_ref().unwrap().1;
        hist.add_example(c.node, buckets, &c.g, &c.h, c.weight)
            .expect("contribution matches histogram");
    }
    hist
}

/// What one shard hands the chief at a flush.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ShardFlush {
    /// Per node key, the best split of every owned feature in the layout.
    pub candidates: Vec<Vec<(FeatureId, Option<SplitCandidate>)>>,
    pub totals: Option<Vec<GradStats>>,
    pub had_boundaries: bool,
    pub has_boundaries: bool,
}

/// Drains one shard: split search with the boundaries the statistics were
/// bucketized with, then fresh boundaries from the summaries.
pub(crate) fn flush_shard(
    acc: &mut QuantileAcc,
    grad: &mut Option<GradHessHistogram>,
    counter: &mut ExampleCounter,
    reg: &RegParams,
    allow_non_positive: bool,
    num_buckets: usize,
) -> ShardFlush {
    let had_boundaries = !acc.boundaries.is_empty();
    let mut candidates = Vec::new();
    let mut totals = None;
    if let Some(hist) = grad.take() {
        let layout = hist.layout();
        for node in 0..hist.num_nodes() {
            let per_feature = layout
                .features
                .iter()
                .enumerate()
                .map(|(pos, f)| {
                    let (buckets, missing) = hist.feature_stats(node, pos);
                    let cand = best_split_for_feature(
                        &buckets,
                        &missing,
                        &acc.boundaries[f],
                        *f,
                        reg,
                        allow_non_positive,
                    );
                    (*f, cand)
                })
                .collect();
            candidates.push(per_feature);
        }
        totals = Some((0..hist.num_nodes()).map(|n| hist.node_totals(n).clone()).collect());
    }
    acc.recompute_boundaries(num_buckets);
    *counter = ExampleCounter::default();
    ShardFlush {
        candidates,
        totals,
        had_boundaries,
        has_boundaries: !acc.boundaries.is_empty(),
    }
}

/// Layer input from all shard flushes, or `None` for a warm-up flush
/// (the first boundaries were just computed, nothing was bucketized).
pub(crate) fn combine_flushes(
    flushes: &[ShardFlush],
    num_keys: usize,
    dim: usize,
) -> Option<Vec<(Vec<Option<SplitCandidate>>, GradStats)>> {
    let had = flushes.iter().any(|f| f.had_boundaries);
    let has = flushes.iter().any(|f| f.has_boundaries);
    if !had && has {
        return None;
    }
    // every push covers all shards at once, so the totals agree
    let totals = flushes
        .iter()
        .find_map(|f| f.totals.clone())
        .unwrap_or_else(|| vec![GradStats::zeros(dim); num_keys]);
    let mut out = Vec::with_capacity(num_keys);
    for (node, total) in totals.into_iter().enumerate() {
        let mut per_feature: Vec<(FeatureId, Option<SplitCandidate>)> = flushes
            .iter()
            .filter(|f| f.totals.is_some())
            .flat_map(|f| f.candidates[node].iter().cloned())
            .collect();
        per_feature.sort_by_key(|(f, _)| *f);
        out.push((per_feature.into_iter().map(|(_, c)| c).collect(), total));
    }
    Some(out)
}
