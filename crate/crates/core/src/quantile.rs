//! Weighted, mergeable epsilon-approximate quantile summaries.
//!
//! Each entry stores a value, a lower bound on the weight equal to it, and
//! bounds `min_rank <= W(<= value) <= max_rank`. `max_rank - weight` then
//! bounds `W(< value)` from above. The summary keeps the gap between
//! neighbouring entries (`max_rank - weight` of the right one minus
//! `min_rank` of the left one) at most `2 * epsilon * W`, which bounds the
//! error of any rank query by `epsilon * W`.

use std::cmp::Ordering;

use thiserror::Error;

use crate::codec::{ByteReader, ByteWriter, LoadError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SketchError {
    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("non-finite value {0} in batch")]
    NonFiniteValue(f64),
    #[error("invalid weight {0} in batch")]
    InvalidWeight(f64),
    #[error("epsilon mismatch: {0} vs {1}")]
    EpsilonMismatch(f64, f64),
    #[error("summary is empty")]
    Empty,
    #[error("num_buckets must be positive")]
    ZeroBuckets,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryEntry {
    pub value: f64,
    pub weight: f64,
    pub min_rank: f64,
    pub max_rank: f64,
}

impl SummaryEntry {
    /// Upper bound on the weight strictly below `value`.
    fn below_hi(&self) -> f64 {
        self.max_rank - self.weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSummary {
    entries: Vec<SummaryEntry>,
    total_weight: f64,
    epsilon: f64,
}

impl QuantileSummary {
    pub fn new(epsilon: f64) -> Result<Self, SketchError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(SketchError::InvalidEpsilon(epsilon));
        }
        Ok(Self {
            entries: Vec::new(),
            total_weight: 0.0,
            epsilon,
        })
    }

    /// Exact summary of one batch. Zero-weight items are ignored.
    pub fn from_batch(epsilon: f64, values: &[(f64, f64)]) -> Result<Self, SketchError> {
        let mut s = Self::new(epsilon)?;
        let mut items = Vec::with_capacity(values.len());
        for &(v, w) in values {
            if !v.is_finite() {
                return Err(SketchError::NonFiniteValue(v));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(SketchError::InvalidWeight(w));
            }
            if w > 0.0 {
                // folds -0.0 into 0.0
                items.push((v + 0.0, w));
            }
        }
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cum = 0.0;
        for (v, w) in items {
            cum += w;
            s.total_weight += w;
            match s.entries.last_mut() {
                Some(last) if last.value == v => {
                    last.weight += w;
                    last.min_rank = cum;
                    last.max_rank = cum;
                }
                _ => s.entries.push(SummaryEntry {
                    value: v,
                    weight: w,
                    min_rank: cum,
                    max_rank: cum,
                }),
            }
        }
        Ok(s)
    }

    pub fn entries(&self) -> &[SummaryEntry] {
        &self.entries
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn min_value(&self) -> Option<f64> {
        self.entries.first().map(|e| e.value)
    }

    pub fn max_value(&self) -> Option<f64> {
        self.entries.last().map(|e| e.value)
    }

    /// Rank scale used by the entries; equals `total_weight` up to rounding.
    fn rank_total(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.max_rank)
    }

    /// Adds a batch of (value, weight) items. The whole batch is rejected if
    /// any value is non-finite or any weight negative.
    pub fn insert_batch(&mut self, values: &[(f64, f64)]) -> Result<(), SketchError> {
        let batch = Self::from_batch(self.epsilon, values)?;
        if batch.is_empty() {
            return Ok(());
        }
        *self = merge_entries(self, &batch).compacted(self.epsilon);
        Ok(())
    }

    pub fn merge(&self, other: &QuantileSummary) -> Result<QuantileSummary, SketchError> {
        if self.epsilon != other.epsilon {
            return Err(SketchError::EpsilonMismatch(self.epsilon, other.epsilon));
        }
        Ok(merge_entries(self, other).compacted(self.epsilon))
    }

    /// Prunes down to at most `ceil(1/epsilon) + 2` entries while keeping
    /// every neighbour gap within `2 * epsilon * W`.
    pub fn compress(&self) -> QuantileSummary {
        self.compacted(2.0 * self.epsilon)
    }

    /// Greedy pruning: keep the extremes, drop an interior entry whenever its
    /// neighbours stay within `factor * W` of each other without it.
    fn compacted(&self, factor: f64) -> QuantileSummary {
        if self.entries.len() <= 2 {
            return self.clone();
        }
        let limit = factor * self.rank_total();
        let n = self.entries.len();
        let mut out = Vec::with_capacity(n);
        out.push(self.entries[0]);
        for j in 1..n - 1 {
            let next = &self.entries[j + 1];
            let kept: &SummaryEntry = out.last().unwrap();
            if next.below_hi() - kept.min_rank <= limit {
                continue;
            }
            out.push(self.entries[j]);
        }
        out.push(self.entries[n - 1]);
        QuantileSummary {
            entries: out,
            total_weight: self.total_weight,
            epsilon: self.epsilon,
        }
    }

    /// Value whose rank interval best covers `rank` (clamped to [0, W]).
    pub fn query(&self, rank: f64) -> Result<f64, SketchError> {
        if self.entries.is_empty() {
            return Err(SketchError::Empty);
        }
        let r = rank.clamp(0.0, self.rank_total());
        let mut best = 0;
        let mut best_err = f64::INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            let err = (r - e.min_rank).max(e.below_hi() - r);
            if err < best_err {
                best_err = err;
                best = i;
            }
        }
        Ok(self.entries[best].value)
    }

    /// Approximate `k / num_buckets` quantiles for `k = 0..=num_buckets`,
    /// pinned to the stream extremes, with duplicates removed.
    pub fn boundaries(&self, num_buckets: usize) -> Result<Vec<f64>, SketchError> {
        if num_buckets == 0 {
            return Err(SketchError::ZeroBuckets);
        }
        if self.entries.is_empty() {
            return Err(SketchError::Empty);
        }
        let total = self.rank_total();
        let mut out = Vec::with_capacity(num_buckets + 1);
        out.push(self.entries[0].value);
        for k in 1..num_buckets {
            let v = self.query(total * k as f64 / num_buckets as f64)?;
            if v > *out.last().unwrap() {
                out.push(v);
            }
        }
        let max = self.entries[self.entries.len() - 1].value;
        if max > *out.last().unwrap() {
            out.push(max);
        }
        Ok(out)
    }

    /// Checks ordering, rank-bound consistency and the gap guarantee.
    pub fn check_invariants(&self) -> Result<(), String> {
        let total: f64 = self.total_weight;
        let slack = 1e-9 * total.max(1.0);
        let limit = 2.0 * self.epsilon * total + slack;
        for w in self.entries.windows(2) {
            if w[0].value.partial_cmp(&w[1].value) != Some(Ordering::Less) {
                return Err(format!("values not increasing at {}", w[1].value));
            }
            if w[1].min_rank + slack < w[0].min_rank || w[1].max_rank + slack < w[0].max_rank {
                return Err(format!("ranks decrease at {}", w[1].value));
            }
            let gap = w[1].below_hi() - w[0].min_rank;
            if gap > limit {
                return Err(format!("gap {gap} exceeds {limit} before {}", w[1].value));
            }
        }
        for e in &self.entries {
            if e.min_rank > e.max_rank + slack {
                return Err(format!("min_rank > max_rank at {}", e.value));
            }
            if e.max_rank - e.min_rank > limit {
                return Err(format!("rank spread too wide at {}", e.value));
            }
            if e.weight <= 0.0 || e.weight > e.min_rank + slack {
                return Err(format!("bad weight at {}", e.value));
            }
        }
        if let Some(last) = self.entries.last() {
            if (last.max_rank - total).abs() > slack || (last.min_rank - total).abs() > slack {
                return Err("last entry does not carry the total weight".into());
            }
        }
        Ok(())
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.f64(self.epsilon);
        w.f64(self.total_weight);
        w.len_u32(self.entries.len());
        for e in &self.entries {
            w.f64(e.value);
            w.f64(e.weight);
            w.f64(e.min_rank);
            w.f64(e.max_rank);
        }
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>) -> Result<Self, LoadError> {
        let epsilon = r.f64()?;
        let mut s = Self::new(epsilon).map_err(|e| LoadError::Invalid(e.to_string()))?;
        s.total_weight = r.f64()?;
        let n = r.count(32)?;
        for _ in 0..n {
            s.entries.push(SummaryEntry {
                value: r.f64()?,
                weight: r.f64()?,
                min_rank: r.f64()?,
                max_rank: r.f64()?,
            });
        }
        s.check_invariants().map_err(LoadError::Invalid)?;
        Ok(s)
    }
}

/// Combines two summaries without pruning. Entries present in only one
/// input borrow rank bounds from the other input's neighbours; equal values
/// sum their fields. The result does not depend on argument order.
fn merge_entries(a: &QuantileSummary, b: &QuantileSummary) -> QuantileSummary {
    let (ea, eb) = (&a.entries, &b.entries);
    let (wa, wb) = (a.rank_total(), b.rank_total());
    let mut out = Vec::with_capacity(ea.len() + eb.len());
    let (mut i, mut j) = (0, 0);
    let borrowed = |e: &SummaryEntry, other: &[SummaryEntry], k: usize, w_other: f64| {
        let lo = if k > 0 { other[k - 1].min_rank } else { 0.0 };
        let hi = other.get(k).map_or(w_other, SummaryEntry::below_hi);
        SummaryEntry {
            value: e.value,
            weight: e.weight,
            min_rank: e.min_rank + lo,
            max_rank: e.max_rank + hi,
        }
    };
    while i < ea.len() || j < eb.len() {
        let ord = match (ea.get(i), eb.get(j)) {
            (Some(x), Some(y)) => x.value.partial_cmp(&y.value).unwrap(),
            (Some(_), None) => Ordering::Less,
            _ => Ordering::Greater,
        };
        match ord {
            Ordering::Less => {
                out.push(borrowed(&ea[i], eb, j, wb));
                i += 1;
            }
            Ordering::Greater => {
                out.push(borrowed(&eb[j], ea, i, wa));
                j += 1;
            }
            Ordering::Equal => {
                let (x, y) = (&ea[i], &eb[j]);
                out.push(SummaryEntry {
                    value: x.value,
                    weight: x.weight + y.weight,
                    min_rank: x.min_rank + y.min_rank,
                    max_rank: x.max_rank + y.max_rank,
                });
                i += 1;
                j += 1;
            }
        }
    }
    QuantileSummary {
        entries: out,
        total_weight: a.total_weight + b.total_weight,
        epsilon: a.epsilon,
    }
}
