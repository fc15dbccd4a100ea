use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::checkpoint;
use super::cluster::{BuildOutcome, Cluster};
use super::log::{EventKind, RunLog};
use super::RuntimeError;
use crate::boosting::{mix_seed, BoostConfig, FlushOutcome, ModelState, SequentialTrainer};
use crate::data::{Batch, BatchId, BatchSource};
use crate::tree_model::{StampToken, TreeEnsemble};

/// Worker kill points. A kill lands after the worker pushed its quantile
/// stats for the given batch iteration and before its gradient push.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreemptionSchedule {
    pub kills: Vec<(u32, u64)>,
    /// Scheduler turns a killed worker stays down.
    pub restart_delay: u64,
}

impl PreemptionSchedule {
    /// Lines of `<worker> <iteration>`, plus an optional `delay <n>`.
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut s = PreemptionSchedule::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || format!("line {}: expected `<worker> <iteration>` or `delay <n>`", i + 1);
            let mut parts = line.split_whitespace();
            let (a, b) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
            if parts.next().is_some() {
                return Err(bad());
            }
            if a == "delay" {
                s.restart_delay = b.parse().map_err(|_| bad())?;
            } else {
                s.kills
                    .push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kills.iter().any(|(w, _)| *w == 0) {
            return Err("the chief (worker 0) cannot be preempted".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Seeds the worker interleaving.
    pub seed: u64,
    pub preemptions: PreemptionSchedule,
    /// Per-step probability that the chief flushes regardless of the
    /// example count.
    pub flush_injection: f64,
    /// Keep every batch so the run can be replayed.
    pub record_batches: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Flushes between checkpoints; 0 checkpoints only at the end.
    pub checkpoint_every: u64,
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub ensemble: TreeEnsemble,
    pub log: RunLog,
    pub batches: BTreeMap<BatchId, Batch>,
    pub complete: bool,
    pub flushes: u64,
}

enum Phase {
    Idle,
    Pushed {
        batch: Batch,
        stamp: StampToken,
        model: Arc<ModelState>,
    },
    Down(u64),
    Exhausted,
}

fn flush_outcome(kind: &str, examples: u64, weight: f64) -> String {
    format!("{kind};examples={examples};weight={weight}")
}

fn outcome_word(accepted: bool) -> &'static str {
    if accepted {
        "accepted"
    } else {
        "stale"
    }
}

struct Sim<'a> {
    cluster: &'a Cluster,
    opts: &'a SimOptions,
    log: RunLog,
    batches: BTreeMap<BatchId, Batch>,
    chief_batch: Option<Batch>,
    flushes: u64,
}

impl Sim<'_> {
    fn chief_build(&mut self, force: bool) -> Result<(), RuntimeError> {
        let Some(batch) = self.chief_batch.as_ref() else {
            return Ok(());
        };
        let stamp = self.cluster.stamp();
        let BuildOutcome::Built {
            stamp: next,
            examples,
            weight,
            flush,
        } = self.cluster.chief_check_and_build(Some(batch), force)?
        else {
            return Ok(());
        };
        let id = batch.id;
        self.flushes += 1;
        match flush {
            FlushOutcome::WarmUp => self.log.push(
                id.iteration,
                id.worker,
                EventKind::Flush,
                stamp,
                flush_outcome("warm_up", examples, weight),
            ),
            FlushOutcome::Layer(r) => {
                self.log.push(
                    id.iteration,
                    id.worker,
                    EventKind::Flush,
                    stamp,
                    flush_outcome("layer", examples, weight),
                );
                self.log.push(
                    id.iteration,
                    id.worker,
                    EventKind::GrowLayer,
                    next,
                    format!("splits={}", r.splits),
                );
                for t in r.finished_trees {
                    self.log.push(
                        id.iteration,
                        id.worker,
                        EventKind::FinalizeTree,
                        next,
                        format!("tree={t}"),
                    );
                }
            }
        }
        if let Some(dir) = &self.opts.checkpoint_dir {
            let every = self.opts.checkpoint_every;
            if every > 0 && self.flushes % every == 0 {
                checkpoint(self.cluster, dir)?;
            }
        }
        Ok(())
    }
}

/// Drives `sources.len()` workers (worker 0 is the chief) in a seeded
/// round-robin-free random interleaving until training completes or every
/// source runs dry. Each scheduler turn advances one worker by one phase.
pub fn run_simulation(
    cluster: &Cluster,
    mut sources: Vec<Box<dyn BatchSource + '_>>,
    opts: &SimOptions,
) -> Result<SimResult, RuntimeError> {
    if sources.is_empty() {
        return Err(RuntimeError::Config("need at least one worker".into()));
    }
    opts.preemptions.validate().map_err(RuntimeError::Config)?;
    let kills: BTreeSet<(u32, u64)> = opts.preemptions.kills.iter().copied().collect();
    let n = sources.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 0x5EED_0F_5171));
    let mut phases: Vec<Phase> = (0..n).map(|_| Phase::Idle).collect();
    let mut sim = Sim {
        cluster,
        opts,
        log: RunLog::default(),
        batches: BTreeMap::new(),
        chief_batch: None,
        flushes: 0,
    };
    let mut steps = 0u64;
    let mut saw_data = false;
    loop {
        if cluster.is_complete() || opts.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let live: Vec<usize> = (0..n)
            .filter(|w| !matches!(phases[*w], Phase::Exhausted))
            .collect();
        if live.is_empty() {
            // last chance for the chief on what was already pushed
            sim.chief_build(false)?;
            break;
        }
        steps += 1;
        if opts.flush_injection > 0.0 && rng.gen_bool(opts.flush_injection) {
            sim.chief_build(true)?;
        }
        let w = live[rng.gen_range(0..live.len())];
        let wid = w as u32;
        match std::mem::replace(&mut phases[w], Phase::Idle) {
            Phase::Exhausted => unreachable!(),
            Phase::Down(left) => {
                if left > 1 {
                    phases[w] = Phase::Down(left - 1);
                } else {
                    sim.log
                        .push(0, wid, EventKind::Restart, cluster.stamp(), "restarted");
                }
            }
            Phase::Idle => {
                let Some(batch) = sources[w].next_batch().map_err(crate::boosting::TrainError::from)?
                else {
                    phases[w] = Phase::Exhausted;
                    continue;
                };
                saw_data = true;
                if opts.record_batches {
                    sim.batches.insert(batch.id, batch.clone());
                }
                let (stamp, model) = cluster.read_model();
                let ok = cluster.push_quantiles(stamp, &batch)?.is_accepted();
                sim.log.push(
                    batch.id.iteration,
                    wid,
                    EventKind::PushQuantile,
                    stamp,
                    outcome_word(ok),
                );
                if ok {
                    phases[w] = Phase::Pushed {
                        batch,
                        stamp,
                        model,
                    };
                } else if w == 0 {
                    sim.chief_batch = Some(batch);
                }
            }
            Phase::Pushed {
                batch,
                stamp,
                model,
            } => {
                if kills.contains(&(wid, batch.id.iteration)) {
                    sim.log.push(
                        batch.id.iteration,
                        wid,
                        EventKind::Kill,
                        cluster.stamp(),
                        "lost_batch",
                    );
                    if opts.preemptions.restart_delay > 0 {
                        phases[w] = Phase::Down(opts.preemptions.restart_delay);
                    } else {
                        sim.log
                            .push(0, wid, EventKind::Restart, cluster.stamp(), "restarted");
                    }
                    continue;
                }
                let ok = cluster.push_gradients(stamp, &model, &batch)?.is_accepted();
                sim.log.push(
                    batch.id.iteration,
                    wid,
                    EventKind::PushGrad,
                    stamp,
                    outcome_word(ok),
                );
                drop(model);
                if w == 0 {
                    sim.chief_batch = Some(batch);
                    sim.chief_build(false)?;
                }
            }
        }
    }
    if !saw_data && !cluster.is_complete() {
        return Err(crate::boosting::TrainError::Data(crate::data::DataError::Empty).into());
    }
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint(cluster, dir)?;
    }
    Ok(SimResult {
        ensemble: cluster.ensemble(),
        complete: cluster.is_complete(),
        log: sim.log,
        batches: sim.batches,
        flushes: sim.flushes,
    })
}

/// Feeds the accepted pushes and the flushes of a run log, in order,
/// through the single-worker reference trainer.
pub fn replay(
    config: &BoostConfig,
    num_features: usize,
    log: &RunLog,
    batches: &BTreeMap<BatchId, Batch>,
) -> Result<TreeEnsemble, RuntimeError> {
    let mut trainer = SequentialTrainer::new(config.clone(), num_features)?;
    let find = |worker: u32, iteration: u64| {
        batches.get(&BatchId { worker, iteration }).ok_or_else(|| {
            RuntimeError::Protocol(format!("log names unknown batch {worker}/{iteration}"))
        })
    };
    for e in &log.events {
        match e.kind {
            EventKind::PushQuantile if e.accepted() => {
                trainer.push_quantiles(find(e.worker, e.iteration)?)?
            }
            EventKind::PushGrad if e.accepted() => {
                trainer.push_gradients(find(e.worker, e.iteration)?)?
            }
            EventKind::Flush => {
                let out = trainer.flush(Some(find(e.worker, e.iteration)?))?;
                let warm = matches!(out, FlushOutcome::WarmUp);
                if warm != e.outcome.starts_with("warm_up") {
                    return Err(RuntimeError::Protocol(format!(
                        "replayed flush at stamp {} disagrees with the log",
                        e.stamp
                    )));
                }
            }
            _ => {}
        }
    }
    Ok(trainer.into_ensemble())
}

/// Stamp audit of a run log: every flush at stamp `s` counts exactly the
/// accepted gradient pushes stamped `s`, and no push stamped `s` is
/// accepted after that flush.
pub fn audit_log(log: &RunLog, batches: &BTreeMap<BatchId, Batch>) -> Result<(), String> {
    let mut pending: BTreeMap<i64, (u64, f64)> = BTreeMap::new();
    let mut flushed: BTreeSet<i64> = BTreeSet::new();
    for e in &log.events {
        match e.kind {
            EventKind::PushQuantile | EventKind::PushGrad if e.accepted() => {
                if flushed.contains(&e.stamp.0) {
                    return Err(format!(
                        "push by worker {} accepted at flushed stamp {}",
                        e.worker, e.stamp
                    ));
                }
                if e.kind == EventKind::PushGrad {
                    let b = batches
                        .get(&BatchId {
                            worker: e.worker,
                            iteration: e.iteration,
                        })
                        .ok_or("unknown batch")?;
                    let p = pending.entry(e.stamp.0).or_default();
                    p.0 += b.len() as u64;
                    p.1 += b.total_weight();
                }
            }
            EventKind::Flush => {
                let (n, w) = pending.remove(&e.stamp.0).unwrap_or_default();
                let logged_n: u64 = e
                    .field("examples")
                    .and_then(|v| v.parse().ok())
                    .ok_or("flush without example count")?;
                let logged_w: f64 = e
                    .field("weight")
                    .and_then(|v| v.parse().ok())
                    .ok_or("flush without weight")?;
                if logged_n != n || (logged_w - w).abs() > 1e-9 * w.abs().max(1.0) {
                    return Err(format!(
                        "flush at stamp {} counted {logged_n} ({logged_w}) but accepted pushes hold {n} ({w})",
                        e.stamp
                    ));
                }
                flushed.insert(e.stamp.0);
            }
            _ => {}
        }
    }
    Ok(())
}
