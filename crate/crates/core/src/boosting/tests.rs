use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Batch, BatchId, Example, FeatureVector, InMemorySource, StreamOptions};
use crate::losses::grad_hess;
use crate::tree_model::{DecisionTree, LeafValue, TreeEnsemble, TreeNode};

fn full_batch_source(examples: &[Example]) -> InMemorySource {
    InMemorySource::new(
        examples.to_vec(),
        StreamOptions {
            batch_size: examples.len(),
            epochs: 0,
            ..StreamOptions::default()
        },
    )
}

fn train_full(cfg: &BoostConfig, examples: &[Example], num_features: usize) -> TreeEnsemble {
    let mut cfg = cfg.clone();
    cfg.examples_per_layer = examples.len() as u64;
    train(&cfg, num_features, &mut full_batch_source(examples)).unwrap()
}

fn random_examples(rng: &mut ChaCha8Rng, n: usize, nf: usize, classes: u32) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let x: Vec<Option<f64>> = (0..nf)
                .map(|_| rng.gen_bool(0.9).then(|| rng.gen_range(-2.0..2.0)))
                .collect();
            let s = x[0].unwrap_or(0.0) + x.get(1).copied().flatten().unwrap_or(0.0).powi(2);
            let label = if classes == 0 {
                s + rng.gen_range(-0.1..0.1)
            } else {
                ((s + 2.0).max(0.0) as u32 % classes) as f64
            };
            Example::new(FeatureVector::from_dense(&x), label)
        })
        .collect()
}

fn mean_loss(e: &TreeEnsemble, obj: &crate::losses::Objective, data: &[Example]) -> f64 {
    data.iter()
        .map(|ex| obj.example_loss(&e.predict(&ex.features, None).unwrap(), ex.label).unwrap())
        .sum::<f64>()
        / data.len() as f64
}

fn batch_of(examples: Vec<Example>) -> Batch {
    Batch {
        id: BatchId::default(),
        examples,
    }
}

#[test]
fn zero_trees_gives_empty_ensemble() {
    let cfg = BoostConfig {
        num_trees: 0,
        ..BoostConfig::default()
    };
    let data = random_examples(&mut ChaCha8Rng::seed_from_u64(1), 10, 2, 0);
    let e = train_full(&cfg, &data, 2);
    assert!(e.is_empty());
    assert_eq!(e.predict(&data[0].features, None).unwrap(), vec![0.0]);
}

#[test]
fn empty_stream_is_an_error() {
    let cfg = BoostConfig::default();
    let mut src = InMemorySource::new(Vec::new(), StreamOptions::default());
    assert!(matches!(
        train(&cfg, 1, &mut src),
        Err(TrainError::Data(crate::data::DataError::Empty))
    ));
}

#[test]
fn stump_leaves_are_side_means() {
    let xs = [1.0, 1.0, 1.0, 5.0, 5.0];
    let ys = [1.0, 2.0, 6.0, -4.0, 8.0];
    let data: Vec<Example> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| Example::new(FeatureVector::from_dense(&[Some(*x)]), y))
        .collect();
    for mode in [GrowthMode::Standard, GrowthMode::LayerByLayer] {
        let cfg = BoostConfig {
            mode,
            num_trees: 1,
            max_depth: 1,
            learning_rate: 1.0,
            ..BoostConfig::default()
        };
        let e = train_full(&cfg, &data, 1);
        assert_eq!(e.len(), 1);
        let left = e.predict(&vec![1.0], None).unwrap()[0];
        let right = e.predict(&vec![5.0], None).unwrap()[0];
        assert!((left - 3.0).abs() < 1e-12, "{left}");
        assert!((right - 2.0).abs() < 1e-12, "{right}");
        let t = &e.trees()[0];
        assert_eq!(t.depth(), 1);
        assert!(t.nodes().iter().all(|n| !matches!(n, TreeNode::Leaf { finalized: false, .. })));
    }
    // unequal means
    let ys2 = [2.0, 2.0, 2.0, -1.0, 0.0];
    let data2: Vec<Example> = xs
        .iter()
        .zip(ys2)
        .map(|(x, y)| Example::new(FeatureVector::from_dense(&[Some(*x)]), y))
        .collect();
    let cfg = BoostConfig {
        num_trees: 1,
        max_depth: 1,
        learning_rate: 1.0,
        ..BoostConfig::default()
    };
    let e = train_full(&cfg, &data2, 1);
    assert!((e.predict(&vec![1.0], None).unwrap()[0] - 2.0).abs() < 1e-12);
    assert!((e.predict(&vec![5.0], None).unwrap()[0] + 0.5).abs() < 1e-12);
}

#[test]
fn gradients_at_empty_ensemble() {
    let obj = crate::losses::Objective::new(
        crate::losses::LossSpec::logistic(),
        crate::tree_model::MulticlassStrategy::None,
        1,
    )
    .unwrap();
    let e = TreeEnsemble::new(1, crate::tree_model::MulticlassStrategy::None).unwrap();
    let b = batch_of(vec![Example::new(FeatureVector::from_dense(&[Some(3.0)]), 1.0); 4]);
    for mode in [GrowthMode::Standard, GrowthMode::LayerByLayer] {
        let gh = compute_gradients_for_growth(&e, &b, &obj, mode, &DropoutDecision::default(), None)
            .unwrap();
        for g in gh {
            assert_eq!(g.gradient, vec![-0.5]);
            assert_eq!(g.hessian, vec![0.25]);
        }
    }
}

#[test]
fn gradients_vanish_after_exact_fit() {
    let data: Vec<Example> = [(0.0, -1.0), (1.0, -0.5), (2.0, 3.0), (3.0, 4.0)]
        .iter()
        .map(|(x, y)| Example::new(FeatureVector::from_dense(&[Some(*x)]), *y))
        .collect();
    let cfg = BoostConfig {
        num_trees: 1,
        max_depth: 2,
        learning_rate: 1.0,
        ..BoostConfig::default()
    };
    let e = train_full(&cfg, &data, 1);
    let obj = cfg.objective().unwrap();
    let gh = compute_gradients_for_growth(
        &e,
        &batch_of(data),
        &obj,
        GrowthMode::Standard,
        &DropoutDecision::default(),
        None,
    )
    .unwrap();
    for g in gh {
        assert!(g.gradient[0].abs() < 1e-12, "{:?}", g.gradient);
    }
}

#[test]
fn growth_gradients_see_partial_tree_only_layer_by_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = random_examples(&mut rng, 200, 3, 0);
    let b = batch_of(data.clone());
    for mode in [GrowthMode::Standard, GrowthMode::LayerByLayer] {
        let cfg = BoostConfig {
            mode,
            num_trees: 3,
            max_depth: 3,
            learning_rate: 0.5,
            examples_per_layer: 200,
            ..BoostConfig::default()
        };
        let mut t = SequentialTrainer::new(cfg.clone(), 3).unwrap();
        // warm-up, the first round, then one layer of the second round
        for _ in 0..5 {
            t.step(&b).unwrap();
        }
        let round = t.state().round.clone().unwrap();
        assert_eq!(round.index, 1);
        assert_eq!(round.layer_depth, 1);
        let e = t.ensemble();
        let obj = cfg.objective().unwrap();
        let contributions = t.engine().contributions(t.state(), &b).unwrap();
        assert_eq!(contributions.len(), data.len());
        for c in &contributions {
            let ex = &data[c.example];
            let scores = match mode {
                GrowthMode::LayerByLayer => e.predict(&ex.features, None).unwrap(),
                GrowthMode::Standard => e
                    .predict_filtered(&ex.features, |i| i < round.first_tree)
                    .unwrap(),
            };
            let want = grad_hess(obj.loss(), &scores, ex.label).unwrap();
            assert_eq!(c.g, want.gradient);
            assert_eq!(c.h, want.hessian);
        }
    }
}

fn constant_tree(v: f64) -> DecisionTree {
    let mut t = DecisionTree::new_leaf(LeafValue::scalar(v));
    t.finalize();
    t
}

#[test]
fn line_search_exact_fit_and_ties() {
    let obj = BoostConfig::default().objective().unwrap();
    let data: Vec<Example> = (0..5)
        .map(|i| Example::new(FeatureVector::default(), 2.0 + 0.0 * i as f64))
        .collect();
    let b = batch_of(data);
    let mut e = TreeEnsemble::new(1, crate::tree_model::MulticlassStrategy::None).unwrap();
    e.push_tree(constant_tree(2.0), 1.0).unwrap();
    assert_eq!(line_search_weight(&e, 0, &BTreeSet::new(), &b, &obj, 1.0).unwrap(), 1.0);

    let mut z = TreeEnsemble::new(1, crate::tree_model::MulticlassStrategy::None).unwrap();
    z.push_tree(constant_tree(0.0), 0.3).unwrap();
    assert_eq!(line_search_weight(&z, 0, &BTreeSet::new(), &b, &obj, 0.3).unwrap(), 0.3 * 0.25);
}

#[test]
fn line_search_matches_grid_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obj = BoostConfig::default().objective().unwrap();
    for _ in 0..50 {
        let base_v = rng.gen_range(-1.0..1.0);
        let tree_v = rng.gen_range(-3.0..3.0);
        let lr = rng.gen_range(0.05..1.0);
        let data: Vec<Example> = (0..20)
            .map(|_| Example::new(FeatureVector::default(), rng.gen_range(-5.0..5.0)))
            .collect();
        let b = batch_of(data.clone());
        let mut e = TreeEnsemble::new(1, crate::tree_model::MulticlassStrategy::None).unwrap();
        e.push_tree(constant_tree(base_v), 1.0).unwrap();
        e.push_tree(constant_tree(tree_v), lr).unwrap();
        let got = line_search_weight(&e, 1, &BTreeSet::new(), &b, &obj, lr).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for m in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let w = lr * m;
            let loss: f64 = data
                .iter()
                .map(|ex| 0.5 * (base_v + w * tree_v - ex.label).powi(2))
                .sum();
            if loss < best.0 - 1e-12 * loss.abs().max(1.0) {
                best = (loss, w);
            }
        }
        assert_eq!(got, best.1);
    }
}

#[test]
fn modes_coincide_at_depth_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..6 {
        let data = random_examples(&mut rng, 150, 3, if case % 2 == 0 { 0 } else { 2 });
        let mut cfg = BoostConfig {
            num_trees: 4,
            max_depth: 1,
            learning_rate: rng.gen_range(0.1..1.0),
            seed: case,
            feature_fraction: if case % 3 == 0 { 0.6 } else { 1.0 },
            dropout: if case == 4 { 0.3 } else { 0.0 },
            line_search: case == 5,
            ..BoostConfig::default()
        };
        if case % 2 == 1 {
            cfg.loss = crate::losses::LossSpec::logistic();
        }
        cfg.mode = GrowthMode::Standard;
        let a = train_full(&cfg, &data, 3);
        cfg.mode = GrowthMode::LayerByLayer;
        let b = train_full(&cfg, &data, 3);
        assert_eq!(a, b, "case {case}");
        assert_eq!(a.len(), 4);
    }
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = random_examples(&mut rng, 300, 4, 0);
    let cfg = BoostConfig {
        num_trees: 5,
        max_depth: 3,
        dropout: 0.2,
        feature_fraction: 0.5,
        example_fraction: 0.7,
        examples_per_layer: 100,
        seed: 77,
        ..BoostConfig::default()
    };
    let run = || {
        let mut src = InMemorySource::new(
            data.clone(),
            StreamOptions {
                batch_size: 50,
                epochs: 0,
                shuffle_seed: Some(3),
                ..StreamOptions::default()
            },
        );
        train(&cfg, 4, &mut src).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.len(), 5);
    a.validate().unwrap();
}

#[test]
fn line_search_descent_on_built_in_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cases = [
        (crate::losses::LossSpec::least_squares(), crate::tree_model::MulticlassStrategy::None, 1u32, 0u32),
        (crate::losses::LossSpec::logistic(), crate::tree_model::MulticlassStrategy::None, 1, 2),
        (
            crate::losses::LossSpec::softmax(3).unwrap(),
            crate::tree_model::MulticlassStrategy::PerClassLeaves,
            3,
            3,
        ),
    ];
    for (loss, strategy, k, classes) in cases {
        let data = random_examples(&mut rng, 200, 3, classes);
        let cfg = BoostConfig {
            num_trees: 8,
            max_depth: 3,
            line_search: true,
            learning_rate: 0.3,
            loss,
            multiclass: strategy,
            num_classes: k,
            ..BoostConfig::default()
        };
        let e = train_full(&cfg, &data, 3);
        let obj = cfg.objective().unwrap();
        let mut prev = f64::INFINITY;
        for n in 0..=e.len() {
            let mut prefix = TreeEnsemble::new(k, strategy).unwrap();
            for t in 0..n {
                prefix.push_tree(e.trees()[t].clone(), e.tree_weights()[t]).unwrap();
            }
            let l = mean_loss(&prefix, &obj, &data);
            assert!(l <= prev + 1e-9, "{}: {l} after {prev}", obj.loss().name());
            prev = l;
        }
    }
}

#[test]
fn dropout_commit_rescales_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = random_examples(&mut rng, 100, 2, 0);
    let cfg = BoostConfig {
        num_trees: 2,
        max_depth: 2,
        learning_rate: 0.5,
        dropout: 0.5,
        seed: 9,
        ..BoostConfig::default()
    };
    let e = train_full(&cfg, &data, 2);
    // the second round must drop the only committed tree
    assert_eq!(e.tree_weights(), &[0.5 * 0.5, 0.5 * 0.5]);
}

#[test]
fn one_vs_rest_grows_a_tree_per_class_each_round() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = random_examples(&mut rng, 200, 2, 3);
    let cfg = BoostConfig {
        num_trees: 3,
        max_depth: 2,
        loss: crate::losses::LossSpec::logistic(),
        multiclass: crate::tree_model::MulticlassStrategy::OneVsRest,
        num_classes: 3,
        line_search: true,
        ..BoostConfig::default()
    };
    let e = train_full(&cfg, &data, 2);
    assert_eq!(e.len(), 9);
    e.validate().unwrap();
    let obj = cfg.objective().unwrap();
    let empty = TreeEnsemble::new(3, crate::tree_model::MulticlassStrategy::OneVsRest).unwrap();
    assert!(mean_loss(&e, &obj, &data) < mean_loss(&empty, &obj, &data));
}

#[test]
fn post_pruning_collapses_unprofitable_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = random_examples(&mut rng, 120, 2, 0);
    let mut cfg = BoostConfig {
        num_trees: 2,
        max_depth: 3,
        pruning: Pruning::Post,
        ..BoostConfig::default()
    };
    let grown = train_full(&cfg, &data, 2);
    assert!(grown.trees().iter().all(|t| t.depth() > 0));
    cfg.reg.tree_complexity = 1e9;
    let e = train_full(&cfg, &data, 2);
    for t in e.trees() {
        assert_eq!(t.nodes().len(), 1);
    }
    // root value is the regularized optimum of the whole batch
    let mean = data.iter().map(|x| x.label).sum::<f64>() / data.len() as f64;
    let root = e.trees()[0].nodes()[0].clone();
    match root {
        TreeNode::Leaf { value, .. } => assert!((value.scores()[0] - mean).abs() < 1e-9),
        _ => panic!("expected a leaf"),
    }
}

#[test]
fn splits_use_only_sampled_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data = random_examples(&mut rng, 200, 6, 0);
    let cfg = BoostConfig {
        num_trees: 6,
        max_depth: 2,
        feature_fraction: 0.34,
        seed: 5,
        ..BoostConfig::default()
    };
    let e = train_full(&cfg, &data, 6);
    for (r, t) in e.trees().iter().enumerate() {
        let mut rng = round_rng(cfg.seed, r as u32);
        let allowed = sample_features(6, 0.34, &mut rng);
        assert_eq!(allowed.len(), 3);
        for n in t.nodes() {
            if let TreeNode::Split { feature, .. } = n {
                assert!(allowed.contains(feature));
            }
        }
    }
}

#[test]
fn invalid_labels_are_rejected() {
    let cfg = BoostConfig {
        num_trees: 1,
        loss: crate::losses::LossSpec::logistic(),
        ..BoostConfig::default()
    };
    let data = vec![Example::new(FeatureVector::from_dense(&[Some(1.0)]), 3.0); 4];
    let mut cfg2 = cfg.clone();
    cfg2.examples_per_layer = 4;
    assert!(matches!(
        train(&cfg2, 1, &mut full_batch_source(&data)),
        Err(TrainError::Loss(_))
    ));
}

#[test]
fn config_validation() {
    let bad = [
        BoostConfig { max_depth: 0, ..BoostConfig::default() },
        BoostConfig { learning_rate: 0.0, ..BoostConfig::default() },
        BoostConfig { dropout: 1.0, ..BoostConfig::default() },
        BoostConfig { feature_fraction: 0.0, ..BoostConfig::default() },
        BoostConfig { epsilon: 1.0, ..BoostConfig::default() },
        BoostConfig { num_classes: 3, ..BoostConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    BoostConfig::default().validate().unwrap();
}
