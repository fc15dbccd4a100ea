//! Examples, input parsers, mini-batch streams and the training config file.

mod config_file;
mod csv;
mod libsvm;
mod stream;

pub use self::config_file::{parse_config, render_config, TrainConfig};
pub use self::csv::{parse_csv, CsvSchema};
pub use self::libsvm::{parse_libsvm, scan_libsvm_num_features};
pub use self::stream::{
    worker_sources, BatchSource, DataFormat, FileStream, InMemorySource, RecordingSource,
    StreamOptions,
};

use thiserror::Error;

use crate::tree_model::{FeatureId, FeatureLookup, ModelError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("empty data stream")]
    Empty,
}

impl DataError {
    pub(crate) fn parse(line: u64, message: impl Into<String>) -> Self {
        DataError::Parse {
            line,
            message: message.into(),
        }
    }
}

/// Sparse feature row; absent ids are missing values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    entries: Vec<(FeatureId, f64)>,
}

impl FeatureVector {
    /// Builds a vector from (id, value) pairs. Ids must be strictly
    /// increasing and values finite.
    pub fn from_sorted(entries: Vec<(FeatureId, f64)>) -> Result<Self, String> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err("feature ids are not strictly increasing".into());
        }
        if let Some((id, _)) = entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(format!("feature {id} has a non-finite value"));
        }
        Ok(Self { entries })
    }

    /// Dense row where `None` marks a missing value.
    pub fn from_dense(values: &[Option<f64>]) -> Self {
        Self {
            entries: values
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i as FeatureId, v)))
                .collect(),
        }
    }

    pub fn get(&self, id: FeatureId) -> Option<f64> {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn entries(&self) -> &[(FeatureId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FeatureLookup for FeatureVector {
    fn lookup(&self, feature: FeatureId) -> Result<Option<f64>, ModelError> {
        Ok(self.get(feature))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureVector,
    /// Regression target, binary label, or class index.
    pub label: f64,
    pub weight: f64,
}

impl Example {
    pub fn new(features: FeatureVector, label: f64) -> Self {
        Self {
            features,
            label,
            weight: 1.0,
        }
    }

    pub fn weighted(features: FeatureVector, label: f64, weight: f64) -> Self {
        Self {
            features,
            label,
            weight,
        }
    }
}

/// Identifies a batch by the worker stream it came from and that worker's
/// iteration counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BatchId {
    pub worker: u32,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub id: BatchId,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.examples.iter().map(|e| e.weight).sum()
    }
}
