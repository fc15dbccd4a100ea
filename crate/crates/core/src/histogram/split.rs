use super::{GradStats, RegParams};
use crate::tree_model::{Direction, FeatureId, LeafValue};

const HESSIAN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidate {
    pub feature: FeatureId,
    /// Index of the first bucket routed right.
    pub bucket: usize,
    pub threshold: f64,
    pub default_direction: Direction,
    pub gain: f64,
    pub left_value: LeafValue,
    pub right_value: LeafValue,
    pub left_stats: GradStats,
    pub right_stats: GradStats,
}

fn optimal_weight(g: f64, h: f64, reg: &RegParams) -> f64 {
    let num = (g.abs() - reg.l1).max(0.0);
    if num == 0.0 {
        return 0.0;
    }
    -g.signum() * num / (h.max(HESSIAN_FLOOR) + reg.l2)
}

/// Per-class minimizer of `g w + (h + l2) w^2 / 2 + l1 |w|`.
pub fn leaf_value(stats: &GradStats, reg: &RegParams) -> LeafValue {
    LeafValue(
        stats
            .g
            .iter()
            .zip(&stats.h)
            .map(|(&g, &h)| optimal_weight(g, h, reg))
            .collect(),
    )
}

/// Objective value at [`leaf_value`]; never positive.
pub fn node_score(stats: &GradStats, reg: &RegParams) -> f64 {
    stats
        .g
        .iter()
        .zip(&stats.h)
        .map(|(&g, &h)| {
            let w = optimal_weight(g, h, reg);
            g * w + 0.5 * (h.max(HESSIAN_FLOOR) + reg.l2) * w * w + reg.l1 * w.abs()
        })
        .sum()
}

fn admissible(s: &GradStats, reg: &RegParams) -> bool {
    s.count > 0 && s.hessian_sum() >= reg.min_node_weight
}

/// Scans every boundary between consecutive buckets with the missing cell
/// sent left and then right. Thresholds are `boundaries[t]` for `t >= 1`.
/// Without `allow_non_positive` only candidates with positive gain are
/// returned.
pub fn best_split_for_feature(
    buckets: &[GradStats],
    missing: &GradStats,
    boundaries: &[f64],
    feature: FeatureId,
    reg: &RegParams,
    allow_non_positive: bool,
) -> Option<SplitCandidate> {
    debug_assert_eq!(buckets.len(), boundaries.len());
    let dim = missing.dim();
    let mut parent = GradStats::sum(dim, buckets);
    parent.add(missing);
    let parent_score = node_score(&parent, reg);

    let mut best: Option<(f64, usize, Direction, GradStats, GradStats)> = None;
    let mut left_present = GradStats::zeros(dim);
    for t in 1..buckets.len() {
        left_present.add(&buckets[t - 1]);
        let right_present = GradStats::sum(dim, &buckets[t..]);
        for dir in [Direction::Left, Direction::Right] {
            let (mut l, mut r) = (left_present.clone(), right_present.clone());
            match dir {
                Direction::Left => l.add(missing),
                Direction::Right => r.add(missing),
            }
            if !admissible(&l, reg) || !admissible(&r, reg) {
                continue;
            }
            let gain =
                parent_score - node_score(&l, reg) - node_score(&r, reg) - reg.tree_complexity;
            if !gain.is_finite() {
                continue;
            }
            if best.as_ref().map_or(true, |b| gain > b.0) {
                best = Some((gain, t, dir, l, r));
            }
        }
    }
    let (gain, t, dir, l, r) = best?;
    if !allow_non_positive && gain <= 0.0 {
        return None;
    }
    Some(SplitCandidate {
        feature,
        bucket: t,
        threshold: boundaries[t],
        default_direction: dir,
        gain,
        left_value: leaf_value(&l, reg),
        right_value: leaf_value(&r, reg),
        left_stats: l,
        right_stats: r,
    })
}

/// Gains closer than this (relative to the larger magnitude, floored at 1)
/// count as tied; different features sum the same examples in different
/// orders, so equal partitions can differ in the last bits.
const GAIN_TIE_TOLERANCE: f64 = 1e-10;

pub(crate) fn gain_beats(new: f64, old: f64) -> bool {
    new > old + GAIN_TIE_TOLERANCE * new.abs().max(old.abs()).max(1.0)
}

/// Highest gain; ties go to the lower feature id, then the lower threshold.
pub fn best_split_across_features(
    candidates: impl IntoIterator<Item = Option<SplitCandidate>>,
) -> Option<SplitCandidate> {
    candidates.into_iter().flatten().fold(None, |best, c| match best {
        None => Some(c),
        Some(b) => {
            let take_new = if gain_beats(c.gain, b.gain) {
                true
            } else if gain_beats(b.gain, c.gain) {
                false
            } else {
                (c.feature, c.threshold) < (b.feature, b.threshold)
            };
            Some(if take_new { c } else { b })
        }
    })
}
