use std::collections::BTreeMap;

use crate::boosting::{ExampleCounter, QuantileAcc};
use crate::histogram::GradHessHistogram;
use crate::quantile::QuantileSummary;
use crate::tree_model::{FeatureId, StampToken, StampedResource};

/// Contiguous ranges of feature ids, one per shard. Shards past the
/// feature count own nothing.
pub fn partition_features(num_features: usize, num_shards: usize) -> Vec<Vec<FeatureId>> {
    assert!(num_shards > 0);
    (0..num_shards)
        .map(|k| {
            let lo = k * num_features / num_shards;
            let hi = (k + 1) * num_features / num_shards;
            (lo as FeatureId..hi as FeatureId).collect()
        })
        .collect()
}

/// One parameter-server shard. Its three resources always carry the same
/// stamp at rest.
#[derive(Debug)]
pub struct PsShard {
    pub id: usize,
    pub owned: Vec<FeatureId>,
    pub quantiles: StampedResource<QuantileAcc>,
    pub grad: StampedResource<Option<GradHessHistogram>>,
    pub counter: StampedResource<ExampleCounter>,
}

impl PsShard {
    pub fn new(id: usize, owned: Vec<FeatureId>) -> Self {
        Self::with_state(
            id,
            owned,
            StampToken(0),
            QuantileAcc::default(),
            None,
            ExampleCounter::default(),
        )
    }

    pub fn with_state(
        id: usize,
        owned: Vec<FeatureId>,
        stamp: StampToken,
        quantiles: QuantileAcc,
        grad: Option<GradHessHistogram>,
        counter: ExampleCounter,
    ) -> Self {
        Self {
            id,
            owned,
            quantiles: StampedResource::with_stamp(stamp, quantiles),
            grad: StampedResource::with_stamp(stamp, grad),
            counter: StampedResource::with_stamp(stamp, counter),
        }
    }

    pub fn owns(&self, f: FeatureId) -> bool {
        self.owned.binary_search(&f).is_ok()
    }

    /// Owned subset of per-feature batch summaries.
    pub fn select(
        &self,
        stats: &BTreeMap<FeatureId, QuantileSummary>,
    ) -> BTreeMap<FeatureId, QuantileSummary> {
        stats
            .iter()
            .filter(|(f, _)| self.owns(**f))
            .map(|(f, s)| (*f, s.clone()))
            .collect()
    }

    /// Owned subset of `features` (increasing).
    pub fn owned_of(&self, features: &[FeatureId]) -> Vec<FeatureId> {
        features.iter().copied().filter(|f| self.owns(*f)).collect()
    }
}
