use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, BatchId};
use crate::tree_model::FeatureId;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from the run seed and a key.
pub fn mix_seed(seed: u64, key: u64) -> u64 {
    splitmix64(seed ^ splitmix64(key))
}

/// Generator for the per-round draws (dropout first, then features).
pub fn round_rng(seed: u64, round: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::from(round)))
}

fn batch_rng(seed: u64, id: BatchId) -> ChaCha8Rng {
    let key = (u64::from(id.worker) << 40) ^ id.iteration;
    ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0xBA66_1AB5, key))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutDecision {
    pub dropped: BTreeSet<usize>,
    /// Factor applied to the new trees' weights at commit.
    pub normalization: f64,
}

impl Default for DropoutDecision {
    fn default() -> Self {
        Self {
            dropped: BTreeSet::new(),
            normalization: 1.0,
        }
    }
}

/// Drops each of the first `num_trees` trees with probability `prob`,
/// forcing one uniformly chosen drop when the draw comes up empty.
pub fn sample_dropout(num_trees: usize, prob: f64, rng: &mut impl Rng) -> DropoutDecision {
    if prob <= 0.0 || num_trees == 0 {
        return DropoutDecision::default();
    }
    let mut dropped: BTreeSet<usize> = (0..num_trees).filter(|_| rng.gen_bool(prob)).collect();
    if dropped.is_empty() {
        dropped.insert(rng.gen_range(0..num_trees));
    }
    let normalization = 1.0 / (dropped.len() as f64 + 1.0);
    DropoutDecision {
        dropped,
        normalization,
    }
}

/// `ceil(fraction * num_features)` distinct ids in increasing order.
pub fn sample_features(num_features: usize, fraction: f64, rng: &mut impl Rng) -> Vec<FeatureId> {
    if fraction >= 1.0 {
        return (0..num_features as FeatureId).collect();
    }
    let k = ((fraction * num_features as f64).ceil() as usize).min(num_features);
    let mut ids: Vec<FeatureId> = index::sample(rng, num_features, k)
        .into_iter()
        .map(|i| i as FeatureId)
        .collect();
    ids.sort_unstable();
    ids
}

/// Bernoulli(`fraction`) subsample of a batch, keyed by the batch id so
/// every replay of the same batch keeps the same examples. Returns the
/// kept example indices.
pub fn sample_examples(batch: &Batch, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..batch.len()).collect();
    }
    let mut rng = batch_rng(seed, batch.id);
    (0..batch.len()).filter(|_| rng.gen_bool(fraction)).collect()
}
