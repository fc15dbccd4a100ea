//! In-process parameter-server runtime: feature-sharded accumulators,
//! stateless workers, a chief that gates layer construction on the example
//! count, run logs with replay, checkpoints, and a deterministic simulator
//! with preemption injection.

mod checkpoint;
mod cluster;
mod log;
mod shard;
mod sim;
mod stress;

pub use checkpoint::{checkpoint, restore, MANIFEST};
pub use cluster::{BuildOutcome, Cluster, IterationOutcome};
pub use log::{EventKind, LogEvent, RunLog};
pub use shard::{partition_features, PsShard};
pub use sim::{audit_log, replay, run_simulation, PreemptionSchedule, SimOptions, SimResult};
pub use stress::{run_concurrent, StressReport};

use thiserror::Error;

use crate::boosting::TrainError;
use crate::codec::LoadError;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Load(#[from] LoadError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no checkpoint in {0}")]
    NoCheckpoint(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("{0}")]
    Config(String),
}

#[cfg(test)]
mod tests;
