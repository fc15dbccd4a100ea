//! Gradient boosted decision trees trained from mini-batch streams, with
//! mergeable quantile sketches for bucketing, feature-sharded histogram
//! aggregation behind stamp-guarded resources, and an in-process simulation
//! of the chief/worker/parameter-server protocol.

pub(crate) mod codec;

pub mod boosting;
pub mod data;
pub mod histogram;
pub mod losses;
pub mod quantile;
pub mod runtime;
pub mod tree_model;

pub use codec::LoadError;
