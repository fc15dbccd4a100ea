use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use super::cluster::{BuildOutcome, Cluster};
use super::RuntimeError;
use crate::boosting::TrainError;
use crate::data::BatchSource;
use crate::tree_model::TreeEnsemble;

/// Outcome of a free-running multi-threaded job. Thread interleaving is up
/// to the OS, so only invariants are checked, never exact models.
#[derive(Debug, Clone)]
pub struct StressReport {
    pub ensemble: TreeEnsemble,
    pub complete: bool,
    pub accepted: u64,
    pub stale: u64,
    pub flushes: u64,
    /// Empty when every flush counted exactly the pushes accepted at its
    /// stamp and all resources ended on one stamp.
    pub violations: Vec<String>,
}

#[derive(Default)]
struct Tally {
    /// Accepted gradient pushes per stamp: (examples, weight).
    pushed: BTreeMap<i64, (u64, f64)>,
    flushed: BTreeMap<i64, (u64, f64)>,
    accepted: u64,
    stale: u64,
}

/// One OS thread per source; thread 0 is the chief and checks the flush
/// condition after each of its own iterations.
pub fn run_concurrent(
    cluster: &Cluster,
    sources: Vec<Box<dyn BatchSource + Send + '_>>,
) -> Result<StressReport, RuntimeError> {
    if sources.is_empty() {
        return Err(RuntimeError::Config("need at least one worker".into()));
    }
    let stop = AtomicBool::new(false);
    let running = AtomicUsize::new(sources.len());
    let tally = Mutex::new(Tally::default());
    let first_error: Mutex<Option<RuntimeError>> = Mutex::new(None);

    thread::scope(|scope| {
        for (w, mut source) in sources.into_iter().enumerate() {
            let (stop, running, tally, first_error) = (&stop, &running, &tally, &first_error);
            scope.spawn(move || {
                let fail = |e: RuntimeError| {
                    first_error.lock().unwrap().get_or_insert(e);
                    stop.store(true, Ordering::SeqCst);
                };
                let mut last = None;
                let mut exhausted = false;
                while !stop.load(Ordering::SeqCst) {
                    if !exhausted {
                        match source.next_batch() {
                            Ok(Some(batch)) => {
                                let (stamp, model) = cluster.read_model();
                                if cluster.engine().is_complete(&model) {
                                    stop.store(true, Ordering::SeqCst);
                                    break;
                                }
                                let ok = cluster
                                    .push_quantiles(stamp, &batch)
                                    .and_then(|q| {
                                        if !q.is_accepted() {
                                            return Ok(false);
                                        }
                                        cluster
                                            .push_gradients(stamp, &model, &batch)
                                            .map(|g| g.is_accepted())
                                    });
                                let mut t = tally.lock().unwrap();
                                match ok {
                                    Ok(true) => {
                                        t.accepted += 1;
                                        let e = t.pushed.entry(stamp.0).or_default();
                                        e.0 += batch.len() as u64;
                                        e.1 += batch.total_weight();
                                    }
                                    Ok(false) => t.stale += 1,
                                    Err(e) => {
                                        drop(t);
                                        fail(e);
                                        break;
                                    }
                                }
                                last = Some(batch);
                            }
                            Ok(None) => {
                                exhausted = true;
                                running.fetch_sub(1, Ordering::SeqCst);
                            }
                            Err(e) => {
                                fail(TrainError::from(e).into());
                                break;
                            }
                        }
                    }
                    if w != 0 {
                        if exhausted {
                            break;
                        }
                        continue;
                    }
                    let others_done = running.load(Ordering::SeqCst) == 0;
                    let stamp = cluster.stamp();
                    match cluster.chief_check_and_build(last.as_ref(), false) {
                        Ok(BuildOutcome::Built {
                            examples, weight, ..
                        }) => {
                            let mut t = tally.lock().unwrap();
                            t.flushed.insert(stamp.0, (examples, weight));
                        }
                        Ok(BuildOutcome::NotReady) if others_done => break,
                        Ok(BuildOutcome::NotReady) => {
                            if exhausted {
                                thread::yield_now();
                            }
                        }
                        Err(e) => {
                            fail(e);
                            break;
                        }
                    }
                    if cluster.is_complete() {
                        stop.store(true, Ordering::SeqCst);
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }

    let t = tally.into_inner().unwrap();
    let mut violations = Vec::new();
    for (stamp, (n, w)) in &t.flushed {
        let (pn, pw) = t.pushed.get(stamp).copied().unwrap_or_default();
        if pn != *n || (pw - w).abs() > 1e-9 * w.abs().max(1.0) {
            violations.push(format!(
                "flush at stamp {stamp} counted {n} examples, accepted pushes hold {pn}"
            ));
        }
    }
    let stamp = cluster.stamp();
    for s in cluster.shards() {
        let stamps = [s.quantiles.stamp(), s.grad.stamp(), s.counter.stamp()];
        if stamps.iter().any(|x| *x != stamp) {
            violations.push(format!("shard {} left at stamps {stamps:?}", s.id));
        }
    }
    Ok(StressReport {
        ensemble: cluster.ensemble(),
        complete: cluster.is_complete(),
        accepted: t.accepted,
        stale: t.stale,
        flushes: t.flushed.len() as u64,
        violations,
    })
}
