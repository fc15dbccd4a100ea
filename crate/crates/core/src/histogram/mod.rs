//! Gradient/Hessian histograms over bucketized features and regularized
//! split search.

mod prune;
mod split;

pub use prune::{post_prune, SplitRecord};
pub use split::{
    best_split_across_features, best_split_for_feature, leaf_value, node_score, SplitCandidate,
};

use thiserror::Error;

use crate::codec::{ByteReader, ByteWriter, LoadError};
use crate::tree_model::FeatureId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistogramError {
    #[error("boundaries are empty")]
    EmptyBoundaries,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("histogram layouts differ")]
    LayoutMismatch,
}

/// Regularization applied to leaf values and split gains.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegParams {
    pub l1: f64,
    pub l2: f64,
    /// Subtracted from the gain of every split.
    pub tree_complexity: f64,
    /// Minimum Hessian sum of each child.
    pub min_node_weight: f64,
}

/// Sums of gradients, Hessians, example weights and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub weight: f64,
    pub count: u64,
}

impl GradStats {
    pub fn zeros(dim: usize) -> Self {
        Self {
            g: vec![0.0; dim],
            h: vec![0.0; dim],
            weight: 0.0,
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn add_example(&mut self, g: &[f64], h: &[f64], weight: f64) {
        for (a, b) in self.g.iter_mut().zip(g) {
            *a += weight * b;
        }
        for (a, b) in self.h.iter_mut().zip(h) {
            *a += weight * b;
        }
        self.weight += weight;
        self.count += 1;
    }

    pub fn add(&mut self, other: &GradStats) {
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += b;
        }
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            *a += b;
        }
        self.weight += other.weight;
        self.count += other.count;
    }

    pub fn sum<'a>(dim: usize, parts: impl IntoIterator<Item = &'a GradStats>) -> GradStats {
        let mut out = GradStats::zeros(dim);
        for p in parts {
            out.add(p);
        }
        out
    }

    pub fn hessian_sum(&self) -> f64 {
        self.h.iter().sum()
    }
}

/// Bucket of `value` given strictly increasing boundaries `b`: bucket `j`
/// holds `[b[j], b[j+1])`, bucket 0 also takes everything below `b[0]` and
/// the last bucket everything from the largest boundary up. `None` is
/// returned for a missing value.
pub fn bucketize(value: Option<f64>, boundaries: &[f64]) -> Result<Option<usize>, HistogramError> {
    if boundaries.is_empty() {
        return Err(HistogramError::EmptyBoundaries);
    }
    Ok(value.map(|v| boundaries.partition_point(|b| *b <= v).saturating_sub(1)))
}

/// Feature set and bucket counts a histogram is laid out over.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistogramLayout {
    pub features: Vec<FeatureId>,
    pub num_buckets: Vec<usize>,
}

impl HistogramLayout {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Dense per-(node, feature, bucket) statistics plus a missing-value cell per
/// (node, feature) and per-node totals.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHessHistogram {
    dim: usize,
    num_nodes: usize,
    layout: HistogramLayout,
    /// Start of each feature's cells within a node block; the missing cell
    /// sits right after the buckets.
    offsets: Vec<usize>,
    cells_per_node: usize,
    g: Vec<f64>,
    h: Vec<f64>,
    weight: Vec<f64>,
    count: Vec<u64>,
    totals: Vec<GradStats>,
}

impl GradHessHistogram {
    pub fn new(dim: usize, num_nodes: usize, layout: HistogramLayout) -> Self {
        assert_eq!(layout.features.len(), layout.num_buckets.len());
        let mut offsets = Vec::with_capacity(layout.len());
        let mut cells_per_node = 0;
        for &nb in &layout.num_buckets {
            offsets.push(cells_per_node);
            cells_per_node += nb + 1;
        }
        let cells = cells_per_node * num_nodes;
        Self {
            dim,
            num_nodes,
            layout,
            offsets,
            cells_per_node,
            g: vec![0.0; cells * dim],
            h: vec![0.0; cells * dim],
            weight: vec![0.0; cells],
            count: vec![0; cells],
            totals: vec![GradStats::zeros(dim); num_nodes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn layout(&self) -> &HistogramLayout {
        &self.layout
    }

    fn cell_index(&self, node: usize, feature_pos: usize, bucket: Option<usize>) -> usize {
        let nb = self.layout.num_buckets[feature_pos];
        let b = match bucket {
            Some(b) => b.min(nb - 1),
            None => nb,
        };
        node * self.cells_per_node + self.offsets[feature_pos] + b
    }

    fn add_to_cell(&mut self, cell: usize, g: &[f64], h: &[f64], weight: f64) {
        let d = self.dim;
        for k in 0..d {
            self.g[cell * d + k] += weight * g[k];
            self.h[cell * d + k] += weight * h[k];
        }
        self.weight[cell] += weight;
        self.count[cell] += 1;
    }

    /// Adds one weighted example. `buckets[i]` is the bucket of layout
    /// feature `i`, `None` when the value is missing.
    pub fn add_example(
        &mut self,
        node: usize,
        buckets: &[Option<usize>],
        g: &[f64],
        h: &[f64],
        weight: f64,
    ) -> Result<(), HistogramError> {
        if node >= self.num_nodes {
            return Err(HistogramError::Dimension(format!(
                "node {node} outside {} nodes",
                self.num_nodes
            )));
        }
        if buckets.len() != self.layout.len() || g.len() != self.dim || h.len() != self.dim {
            return Err(HistogramError::Dimension(format!(
                "expected {} features and {} classes",
                self.layout.len(),
                self.dim
            )));
        }
        for (pos, b) in buckets.iter().enumerate() {
            let cell = self.cell_index(node, pos, *b);
            self.add_to_cell(cell, g, h, weight);
        }
        self.totals[node].add_example(g, h, weight);
        Ok(())
    }

    /// Batch form of [`add_example`](Self::add_example).
    pub fn accumulate(
        &mut self,
        assignments: &[usize],
        buckets: &[Vec<Option<usize>>],
        gradients: &[Vec<f64>],
        hessians: &[Vec<f64>],
        weights: &[f64],
    ) -> Result<(), HistogramError> {
        let n = assignments.len();
        if buckets.len() != n || gradients.len() != n || hessians.len() != n || weights.len() != n {
            return Err(HistogramError::Dimension("per-example arrays differ in length".into()));
        }
        for i in 0..n {
            self.add_example(assignments[i], &buckets[i], &gradients[i], &hessians[i], weights[i])?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &GradHessHistogram) -> Result<(), HistogramError> {
        if self.dim != other.dim || self.num_nodes != other.num_nodes || self.layout != other.layout
        {
            return Err(HistogramError::LayoutMismatch);
        }
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += b;
        }
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            *a += b;
        }
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            a.add(b);
        }
        Ok(())
    }

    fn stats_at(&self, cell: usize) -> GradStats {
        let d = self.dim;
        GradStats {
            g: self.g[cell * d..(cell + 1) * d].to_vec(),
            h: self.h[cell * d..(cell + 1) * d].to_vec(),
            weight: self.weight[cell],
            count: self.count[cell],
        }
    }

    /// Per-bucket and missing statistics of one (node, layout feature).
    pub fn feature_stats(&self, node: usize, feature_pos: usize) -> (Vec<GradStats>, GradStats) {
        let nb = self.layout.num_buckets[feature_pos];
        let buckets = (0..nb)
            .map(|b| self.stats_at(self.cell_index(node, feature_pos, Some(b))))
            .collect();
        let missing = self.stats_at(self.cell_index(node, feature_pos, None));
        (buckets, missing)
    }

    pub fn node_totals(&self, node: usize) -> &GradStats {
        &self.totals[node]
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.len_u32(self.dim);
        w.len_u32(self.num_nodes);
        w.len_u32(self.layout.len());
        for (f, nb) in self.layout.features.iter().zip(&self.layout.num_buckets) {
            w.u32(*f);
            w.len_u32(*nb);
        }
        for i in 0..self.weight.len() {
            for k in 0..self.dim {
                w.f64(self.g[i * self.dim + k]);
                w.f64(self.h[i * self.dim + k]);
            }
            w.f64(self.weight[i]);
            w.u64(self.count[i]);
        }
        for t in &self.totals {
            for k in 0..self.dim {
                w.f64(t.g[k]);
                w.f64(t.h[k]);
            }
            w.f64(t.weight);
            w.u64(t.count);
        }
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>) -> Result<Self, LoadError> {
        let dim = r.u32()? as usize;
        let num_nodes = r.u32()? as usize;
        if dim == 0 {
            return Err(LoadError::Invalid("histogram with zero classes".into()));
        }
        let nf = r.count(8)?;
        let mut layout = HistogramLayout::default();
        for _ in 0..nf {
            layout.features.push(r.u32()?);
            let nb = r.u32()? as usize;
            if nb == 0 {
                return Err(LoadError::Invalid("feature with zero buckets".into()));
            }
            layout.num_buckets.push(nb);
        }
        let cells: usize = layout.num_buckets.iter().map(|nb| nb + 1).sum::<usize>();
        let needed = (cells + 1)
            .saturating_mul(num_nodes)
            .saturating_mul(16 * dim + 16);
        if needed > r.remaining() {
            return Err(LoadError::Truncated {
                needed,
                offset: r.position(),
            });
        }
        let mut hist = GradHessHistogram::new(dim, num_nodes, layout);
        let read_stats = |r: &mut ByteReader<'_>, g: &mut [f64], h: &mut [f64]| -> Result<(f64, u64), LoadError> {
            for k in 0..dim {
                g[k] = r.f64()?;
                h[k] = r.f64()?;
            }
            Ok((r.f64()?, r.u64()?))
        };
        for i in 0..hist.weight.len() {
            let (wt, c) = read_stats(
                r,
                &mut hist.g[i * dim..(i + 1) * dim],
                &mut hist.h[i * dim..(i + 1) * dim],
            )?;
            hist.weight[i] = wt;
            hist.count[i] = c;
        }
        for t in hist.totals.iter_mut() {
            let (wt, c) = read_stats(r, &mut t.g, &mut t.h)?;
            t.weight = wt;
            t.count = c;
        }
        Ok(hist)
    }
}
