use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::boosting::{train, BoostConfig, FlushOutcome, GrowthMode};
use crate::data::{Batch, BatchId, BatchSource, Example, FeatureVector, InMemorySource, StreamOptions};
use crate::tree_model::StampToken;

/// Two informative features plus noise; integer labels keep every
/// gradient sum exact at the empty model.
fn examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<Option<f64>> = (0..4)
                .map(|_| rng.gen_bool(0.95).then(|| rng.gen_range(-3i32..=3) as f64))
                .collect();
            let y = 2.0 * x[0].unwrap_or(0.0) + if x[1].unwrap_or(0.0) > 0.0 { 3.0 } else { -1.0 };
            Example::new(FeatureVector::from_dense(&x), y)
        })
        .collect()
}

fn small_config() -> BoostConfig {
    BoostConfig {
        num_trees: 3,
        max_depth: 2,
        examples_per_layer: 50,
        learning_rate: 0.5,
        ..BoostConfig::default()
    }
}

fn sources(data: &[Example], n: u32, batch_size: usize) -> Vec<Box<dyn BatchSource + Send>> {
    let shared = Arc::new(data.to_vec());
    (0..n)
        .map(|w| {
            Box::new(InMemorySource::partitioned(
                shared.clone(),
                w,
                n,
                StreamOptions {
                    batch_size,
                    epochs: 0,
                    ..StreamOptions::default()
                },
            )) as Box<dyn BatchSource + Send>
        })
        .collect()
}

fn boxed(v: Vec<Box<dyn BatchSource + Send>>) -> Vec<Box<dyn BatchSource>> {
    v.into_iter().map(|s| s as Box<dyn BatchSource>).collect()
}

fn batch(worker: u32, iteration: u64, examples: Vec<Example>) -> Batch {
    Batch {
        id: BatchId { worker, iteration },
        examples,
    }
}

fn recorded(seed: u64) -> SimOptions {
    SimOptions {
        seed,
        record_batches: true,
        ..SimOptions::default()
    }
}

#[test]
fn feature_partition_is_contiguous_and_covering() {
    let p = partition_features(10, 4);
    assert_eq!(p.concat(), (0..10).collect::<Vec<_>>());
    assert!(p.iter().all(|s| s.windows(2).all(|w| w[1] == w[0] + 1)));
    assert_eq!(partition_features(2, 4).iter().filter(|s| s.is_empty()).count(), 2);
}

#[test]
fn accepted_iteration_counts_the_batch() {
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    let b = batch(0, 0, examples(17, 1));
    assert_eq!(c.worker_iteration(&b).unwrap(), IterationOutcome::Accepted);
    for s in c.shards() {
        assert_eq!(s.counter.read().1.count, 17);
    }
    assert_eq!(c.stamp(), StampToken(0));
}

#[test]
fn flush_between_pushes_discards_the_iteration() {
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    let data = examples(40, 2);
    c.worker_iteration(&batch(0, 0, data[..20].to_vec())).unwrap();
    // warm-up so that gradient pushes carry real histograms
    c.chief_check_and_build(None, true).unwrap();
    c.worker_iteration(&batch(0, 1, data[..20].to_vec())).unwrap();

    let late = batch(1, 0, data[20..].to_vec());
    let (stamp, model) = c.read_model();
    assert!(c.push_quantiles(stamp, &late).unwrap().is_accepted());
    let built = c.chief_check_and_build(None, true).unwrap();
    assert!(matches!(built, BuildOutcome::Built { .. }));
    assert!(!c.push_gradients(stamp, &model, &late).unwrap().is_accepted());
    for s in c.shards() {
        assert_eq!(s.grad.read(), (StampToken(2), Arc::new(None)));
        assert_eq!(s.counter.read().1.count, 0);
    }
}

#[test]
fn two_workers_merge_like_one() {
    let data = examples(60, 3);
    let run = |parts: Vec<Batch>| {
        let c = Cluster::new(small_config(), 4, 3).unwrap();
        c.worker_iteration(&batch(0, 0, data.clone())).unwrap();
        c.chief_check_and_build(None, true).unwrap();
        for b in &parts {
            assert_eq!(c.worker_iteration(b).unwrap(), IterationOutcome::Accepted);
        }
        c.shards()
            .iter()
            .map(|s| (s.grad.read().1, *s.counter.read().1))
            .collect::<Vec<_>>()
    };
    let split = run(vec![
        batch(0, 1, data[..25].to_vec()),
        batch(1, 0, data[25..].to_vec()),
    ]);
    let whole = run(vec![batch(0, 1, data.clone())]);
    assert_eq!(split, whole);
    assert!(split.iter().any(|(g, _)| g.is_some()));
}

#[test]
fn chief_waits_for_the_threshold() {
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    let data = examples(120, 4);
    c.worker_iteration(&batch(0, 0, data[..30].to_vec())).unwrap();
    assert_eq!(c.chief_check_and_build(None, false).unwrap(), BuildOutcome::NotReady);
    assert_eq!(c.stamp(), StampToken(0));
    c.worker_iteration(&batch(0, 1, data[30..60].to_vec())).unwrap();
    let out = c.chief_check_and_build(None, false).unwrap();
    assert!(matches!(
        out,
        BuildOutcome::Built { stamp: StampToken(1), examples: 60, flush: FlushOutcome::WarmUp, .. }
    ));
    c.worker_iteration(&batch(0, 2, data[60..].to_vec())).unwrap();
    let out = c.chief_check_and_build(None, false).unwrap();
    let BuildOutcome::Built { stamp, flush: FlushOutcome::Layer(r), .. } = out else {
        panic!("expected a layer, got {out:?}");
    };
    assert_eq!(stamp, StampToken(2));
    assert!(r.splits >= 1);
    assert_eq!(c.ensemble().trees()[0].depth(), 1);
}

#[test]
fn small_run_matches_sequential_replay() {
    let cfg = small_config();
    let data = examples(200, 5);
    let c = Cluster::new(cfg.clone(), 4, 4).unwrap();
    let r = run_simulation(&c, boxed(sources(&data, 3, 10)), &recorded(11)).unwrap();
    assert!(r.complete);
    assert_eq!(r.ensemble.len(), 3);
    audit_log(&r.log, &r.batches).unwrap();
    assert_eq!(replay(&cfg, 4, &r.log, &r.batches).unwrap(), r.ensemble);
}

#[test]
fn one_worker_equals_direct_training() {
    for mode in [GrowthMode::LayerByLayer, GrowthMode::Standard] {
        let cfg = BoostConfig {
            mode,
            ..small_config()
        };
        let data = examples(150, 6);
        let c = Cluster::new(cfg.clone(), 4, 3).unwrap();
        let r = run_simulation(&c, boxed(sources(&data, 1, 25)), &SimOptions::default()).unwrap();
        let direct = train(&cfg, 4, &mut *sources(&data, 1, 25).remove(0)).unwrap();
        assert_eq!(r.ensemble, direct);
    }
}

#[test]
fn preempted_workers_still_finish() {
    let cfg = small_config();
    let data = examples(200, 7);
    let opts = SimOptions {
        preemptions: PreemptionSchedule {
            kills: vec![(1, 2), (2, 3), (3, 5)],
            restart_delay: 4,
        },
        ..recorded(12)
    };
    let c = Cluster::new(cfg.clone(), 4, 2).unwrap();
    let r = run_simulation(&c, boxed(sources(&data, 4, 8)), &opts).unwrap();
    assert!(r.complete);
    let kills = r.log.events.iter().filter(|e| e.kind == EventKind::Kill).count();
    let restarts = r.log.events.iter().filter(|e| e.kind == EventKind::Restart).count();
    assert_eq!((kills, restarts), (3, 3));
    audit_log(&r.log, &r.batches).unwrap();
    assert_eq!(replay(&cfg, 4, &r.log, &r.batches).unwrap(), r.ensemble);
}

#[test]
fn simulation_is_deterministic() {
    let cfg = small_config();
    let data = examples(200, 8);
    let opts = SimOptions {
        flush_injection: 0.05,
        ..recorded(13)
    };
    let once = || {
        let c = Cluster::new(cfg.clone(), 4, 3).unwrap();
        run_simulation(&c, boxed(sources(&data, 3, 7)), &opts).unwrap()
    };
    let (a, b) = (once(), once());
    assert_eq!(a.ensemble, b.ensemble);
    assert_eq!(a.log, b.log);
}

#[test]
fn random_interleavings_pass_the_audit() {
    let data = examples(120, 9);
    let mut stale = 0;
    for seed in 0..12u64 {
        let cfg = BoostConfig {
            mode: if seed % 2 == 0 { GrowthMode::LayerByLayer } else { GrowthMode::Standard },
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let workers = rng.gen_range(1..5u32);
        let kills = (1..workers).map(|w| (w, rng.gen_range(0..6u64))).collect();
        let opts = SimOptions {
            preemptions: PreemptionSchedule {
                kills,
                restart_delay: rng.gen_range(0..5),
            },
            flush_injection: 0.1,
            ..recorded(seed)
        };
        let c = Cluster::new(cfg.clone(), 4, rng.gen_range(1..5)).unwrap();
        let r = run_simulation(&c, boxed(sources(&data, workers, 6)), &opts).unwrap();
        assert!(r.complete, "seed {seed}");
        stale += r.log.events.iter().filter(|e| e.outcome == "stale").count();
        audit_log(&r.log, &r.batches).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert_eq!(replay(&cfg, 4, &r.log, &r.batches).unwrap(), r.ensemble, "seed {seed}");
        let text = r.log.to_tsv();
        assert_eq!(RunLog::parse_tsv(&text).unwrap(), r.log);
    }
    assert!(stale > 0, "no interleaving produced a stale push");
}

#[test]
fn audit_catches_a_miscounted_flush() {
    let data = examples(100, 10);
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    let mut r = run_simulation(&c, boxed(sources(&data, 2, 10)), &recorded(3)).unwrap();
    let f = r.log.events.iter_mut().find(|e| e.kind == EventKind::Flush).unwrap();
    f.outcome = f.outcome.replace("examples=", "examples=1");
    assert!(audit_log(&r.log, &r.batches).is_err());
}

/// Drives iterations by hand over a fixed batch list so a run can be cut
/// anywhere and resumed from disk.
fn drive(c: &Cluster, batches: &[Batch]) {
    for b in batches {
        if c.is_complete() {
            return;
        }
        c.worker_iteration(b).unwrap();
        if b.id.worker == 0 {
            c.chief_check_and_build(Some(b), false).unwrap();
        }
    }
}

fn batch_list(data: &[Example], n: usize) -> Vec<Batch> {
    let mut out = Vec::new();
    let mut it = 0;
    while out.len() < n {
        for (k, chunk) in data.chunks(15).enumerate() {
            out.push(batch((k % 2) as u32, it, chunk.to_vec()));
            it += 1;
        }
    }
    out.truncate(n);
    out
}

#[test]
fn restore_then_continue_equals_uninterrupted() {
    let cfg = BoostConfig {
        quantile_carry: crate::boosting::QuantileCarry::PerTree,
        ..small_config()
    };
    let data = examples(150, 11);
    let batches = batch_list(&data, 400);
    let full = Cluster::new(cfg.clone(), 4, 3).unwrap();
    drive(&full, &batches);
    assert!(full.is_complete());

    for cut in [1, 3, 7, 12, 20, 33] {
        let dir = tempfile::tempdir().unwrap();
        let first = Cluster::new(cfg.clone(), 4, 3).unwrap();
        drive(&first, &batches[..cut]);
        checkpoint(&first, dir.path()).unwrap();
        drop(first);
        let resumed = restore(dir.path(), cfg.clone(), 4).unwrap();
        drive(&resumed, &batches[cut..]);
        assert_eq!(resumed.ensemble(), full.ensemble(), "cut at {cut}");
        assert_eq!(resumed.stamp(), full.stamp());
    }
}

#[test]
fn restore_from_empty_directory_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        restore(dir.path(), small_config(), 4),
        Err(RuntimeError::NoCheckpoint(_))
    ));
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    drive(&c, &batch_list(&examples(60, 12), 10));
    checkpoint(&c, dir.path()).unwrap();
    let path = dir.path().join("shard_1.tfbt");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        restore(dir.path(), small_config(), 4),
        Err(RuntimeError::Load(_))
    ));
    assert!(restore(dir.path(), small_config(), 5).is_err());
}

#[test]
fn warm_restart_keeps_existing_trees() {
    let dir = tempfile::tempdir().unwrap();
    let data = examples(150, 13);
    let batches = batch_list(&data, 400);
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    drive(&c, &batches);
    assert!(c.is_complete());
    checkpoint(&c, dir.path()).unwrap();
    let before = c.ensemble();

    let more = BoostConfig {
        num_trees: 5,
        ..small_config()
    };
    let resumed = restore(dir.path(), more, 4).unwrap();
    assert!(!resumed.is_complete());
    drive(&resumed, &batches);
    assert!(resumed.is_complete());
    let after = resumed.ensemble();
    assert_eq!(after.len(), 5);
    assert_eq!(&after.trees()[..3], before.trees());
    assert_eq!(&after.tree_weights()[..3], before.tree_weights());
}

#[test]
fn simulation_checkpoints_periodically() {
    let dir = tempfile::tempdir().unwrap();
    let data = examples(100, 14);
    let opts = SimOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 2,
        ..SimOptions::default()
    };
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    let r = run_simulation(&c, boxed(sources(&data, 2, 10)), &opts).unwrap();
    let back = restore(dir.path(), small_config(), 4).unwrap();
    assert_eq!(back.ensemble(), r.ensemble);
    assert!(back.is_complete());
}

#[test]
fn preemption_schedule_parsing() {
    let s = PreemptionSchedule::parse("# kills\n1 4\n2 0\ndelay 3\n").unwrap();
    assert_eq!(s.kills, vec![(1, 4), (2, 0)]);
    assert_eq!(s.restart_delay, 3);
    assert!(PreemptionSchedule::parse("0 2").is_err());
    assert!(PreemptionSchedule::parse("1").is_err());
    assert!(PreemptionSchedule::parse("1 2 3").is_err());
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    let opts = SimOptions {
        preemptions: PreemptionSchedule {
            kills: vec![(0, 1)],
            restart_delay: 0,
        },
        ..SimOptions::default()
    };
    assert!(run_simulation(&c, boxed(sources(&examples(10, 1), 1, 5)), &opts).is_err());
}

#[test]
fn empty_sources_are_an_error() {
    let c = Cluster::new(small_config(), 4, 2).unwrap();
    let empty: Vec<Box<dyn BatchSource>> =
        vec![Box::new(InMemorySource::new(Vec::new(), StreamOptions::default()))];
    assert!(run_simulation(&c, empty, &SimOptions::default()).is_err());
    assert!(run_simulation(&c, Vec::new(), &SimOptions::default()).is_err());
}

#[test]
fn concurrent_workers_keep_the_invariants() {
    let data = examples(300, 15);
    for workers in [1u32, 4] {
        let c = Cluster::new(small_config(), 4, 3).unwrap();
        let report = run_concurrent(&c, sources(&data, workers, 5)).unwrap();
        assert!(report.complete);
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        assert_eq!(report.ensemble.len(), 3);
        assert!(report.flushes >= 6);
    }
}
