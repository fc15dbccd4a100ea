use std::fs;

use tfbt::boosting::train;
use tfbt::data::{parse_config, render_config, worker_sources, CsvSchema, DataFormat, StreamOptions};
use tfbt::runtime::{checkpoint, restore, run_simulation, Cluster, SimOptions};
use tfbt::tree_model::{deserialize_ensemble, serialize_ensemble};

fn write_data(path: &std::path::Path) {
    let mut s = String::from("a,b,label\n");
    for i in 0..400 {
        let a = (i * 37 % 101) as f64 / 10.0;
        let b = (i * 11 % 13) as f64;
        let y = if a > 5.0 { 3.0 } else { -1.0 } + 0.1 * b;
        s.push_str(&format!("{a},{b},{y}\n"));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn csv_to_model_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_data(&data);
    let cfg = parse_config(
        "num_trees = 4\nmax_depth = 2\nexamples_per_layer = 100\nbatch_size = 50\nn_workers = 3\n",
    )
    .unwrap();
    assert_eq!(render_config(&parse_config(&render_config(&cfg)).unwrap()), render_config(&cfg));

    let opts = StreamOptions {
        batch_size: cfg.batch_size,
        epochs: 0,
        ..StreamOptions::default()
    };
    let format = DataFormat::Csv(CsvSchema::default());
    let streams = worker_sources(&data, &format, None, 3, opts).unwrap();
    let cluster = Cluster::new(cfg.boost.clone(), 2, 2).unwrap();
    let run = run_simulation(
        &cluster,
        streams.into_iter().map(|s| Box::new(s) as _).collect(),
        &SimOptions::default(),
    )
    .unwrap();
    assert!(run.complete);
    assert_eq!(run.ensemble.len(), 4);

    checkpoint(&cluster, dir.path()).unwrap();
    let bytes = fs::read(dir.path().join("ensemble.tfbt")).unwrap();
    let (_, loaded) = deserialize_ensemble(&bytes).unwrap();
    assert_eq!(loaded, run.ensemble);
    let again = restore(dir.path(), cfg.boost.clone(), 2).unwrap();
    assert!(again.is_complete());
    assert_eq!(
        serialize_ensemble(&again.ensemble(), again.stamp()),
        serialize_ensemble(&cluster.ensemble(), cluster.stamp())
    );
}

#[test]
fn single_stream_training_fits_a_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_data(&data);
    let cfg = parse_config("num_trees = 10\nmax_depth = 2\nlearning_rate = 0.5\nexamples_per_layer = 400\n").unwrap();
    let mut streams = worker_sources(
        &data,
        &DataFormat::Csv(CsvSchema::default()),
        None,
        1,
        StreamOptions {
            batch_size: 400,
            epochs: 0,
            ..StreamOptions::default()
        },
    )
    .unwrap();
    let model = train(&cfg.boost, 2, &mut streams[0]).unwrap();
    let obj = cfg.boost.objective().unwrap();
    let x = |a: f64| tfbt::data::FeatureVector::from_dense(&[Some(a), Some(0.0)]);
    let lo = model.predict(&x(1.0), None).unwrap();
    let hi = model.predict(&x(9.0), None).unwrap();
    // at b = 0 the targets are -1 and 3; the b term shifts each side by under 1.2
    assert!(obj.example_loss(&lo, -0.4).unwrap() < 0.2, "{lo:?}");
    assert!(obj.example_loss(&hi, 3.6).unwrap() < 0.2, "{hi:?}");
}
