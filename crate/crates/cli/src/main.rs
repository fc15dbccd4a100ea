use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use tfbt::data::{
    parse_config, render_config, worker_sources, BatchSource, CsvSchema, DataFormat, FileStream,
    StreamOptions, TrainConfig,
};
use tfbt::losses::Objective;
use tfbt::runtime::{restore, run_simulation, Cluster, EventKind, PreemptionSchedule, SimOptions};
use tfbt::tree_model::{deserialize_ensemble, TreeEnsemble};

const MODEL_FILE: &str = "ensemble.tfbt";
const CONFIG_FILE: &str = "train.conf";
const RUN_LOG: &str = "run.log";

#[derive(Parser)]
#[command(name = "tfbt", version, about = "Gradient boosted trees on mini-batch streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the checkpoint, run log and resolved config to --out.
    Train(TrainArgs),
    /// Write one tab-separated score vector per input example.
    Predict(PredictArgs),
    /// Report loss, plus accuracy and per-class counts for classifiers.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides n_workers from the config file.
    #[arg(long)]
    workers: Option<u32>,
    /// Lines of `<worker> <iteration>`, optionally `delay <n>`.
    #[arg(long)]
    preempt_schedule: Option<PathBuf>,
    /// Overrides any config key, e.g. `--set num_trees=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    skip_bad_rows: bool,
    /// Continue from the checkpoint in --out instead of starting over.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Training output directory, or a model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

fn load_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg =
        parse_config(&text).with_context(|| format!("in {}", args.config.display()))?;
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())
            .map_err(anyhow::Error::msg)
            .context("--set")?;
    }
    if let Some(w) = args.workers {
        cfg.n_workers = w;
    }
    if args.skip_bad_rows {
        cfg.skip_bad_rows = true;
    }
    cfg.validate().map_err(anyhow::Error::msg)?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_train_config(&args)?;
    let schedule = match &args.preempt_schedule {
        Some(p) => PreemptionSchedule::parse(&fs::read_to_string(p)?)
            .map_err(anyhow::Error::msg)
            .with_context(|| format!("in {}", p.display()))?,
        None => PreemptionSchedule::default(),
    };
    let schema = CsvSchema {
        label: cfg.label_column.clone(),
        weight: cfg.weight_column.clone(),
        ..CsvSchema::default()
    };
    let format = DataFormat::detect(&args.data, schema);
    let options = StreamOptions {
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        shuffle_seed: cfg.shuffle_seed,
        skip_bad_rows: cfg.skip_bad_rows,
    };
    let mut streams = worker_sources(&args.data, &format, cfg.num_features, cfg.n_workers, options)
        .with_context(|| format!("opening {}", args.data.display()))?;
    let num_features = streams[0].num_features();
    info!("{num_features} features, {} workers", cfg.n_workers);

    fs::create_dir_all(&args.out)?;
    let cluster = if args.resume {
        restore(&args.out, cfg.boost.clone(), num_features)?
    } else {
        Cluster::new(cfg.boost.clone(), num_features, cfg.n_shards as usize)?
    };
    let opts = SimOptions {
        seed: cfg.boost.seed,
        preemptions: schedule,
        checkpoint_dir: Some(args.out.clone()),
        checkpoint_every: cfg.checkpoint_every,
        ..SimOptions::default()
    };
    let sources: Vec<Box<dyn BatchSource + '_>> = streams
        .iter_mut()
        .map(|s| Box::new(s) as Box<dyn BatchSource>)
        .collect();
    let result = run_simulation(&cluster, sources, &opts)?;

    fs::write(args.out.join(RUN_LOG), result.log.to_tsv())?;
    fs::write(args.out.join(CONFIG_FILE), render_config(&cfg))?;
    let skipped: u64 = streams.iter().map(FileStream::skipped).sum();
    if skipped > 0 {
        warn!("skipped {skipped} malformed rows");
    }
    if !result.complete {
        warn!("data ran out before all {} rounds were built", cfg.boost.num_trees);
    }
    let count = |kind: EventKind, outcome: &str| {
        result
            .log
            .events
            .iter()
            .filter(|e| e.kind == kind && e.outcome == outcome)
            .count()
    };
    println!(
        "trees={} flushes={} accepted={} stale={} skipped_rows={skipped} complete={}",
        result.ensemble.len(),
        result.flushes,
        count(EventKind::PushGrad, "accepted"),
        count(EventKind::PushGrad, "stale"),
        result.complete
    );
    Ok(())
}

struct LoadedModel {
    ensemble: TreeEnsemble,
    /// Known when the training config sits beside the model.
    config: Option<TrainConfig>,
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let (file, dir) = if path.is_dir() {
        (path.join(MODEL_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
    let (_, ensemble) =
        deserialize_ensemble(&bytes).with_context(|| format!("loading {}", file.display()))?;
    let conf = dir.join(CONFIG_FILE);
    let config = if conf.exists() {
        let text = fs::read_to_string(&conf)?;
        Some(parse_config(&text).with_context(|| format!("in {}", conf.display()))?)
    } else {
        None
    };
    Ok(LoadedModel { ensemble, config })
}

impl LoadedModel {
    fn objective(&self) -> Result<Option<Objective>> {
        self.config
            .as_ref()
            .map(|c| c.boost.objective())
            .transpose()
            .map_err(Into::into)
    }

    fn stream(&self, data: &Path, label_required: bool) -> Result<FileStream> {
        let schema = match &self.config {
            Some(c) => CsvSchema {
                label: c.label_column.clone(),
                weight: c.weight_column.clone(),
                label_required,
            },
            None => CsvSchema {
                label_required,
                ..CsvSchema::default()
            },
        };
        let options = StreamOptions {
            batch_size: 4096,
            epochs: 1,
            ..StreamOptions::default()
        };
        FileStream::open(data, DataFormat::detect(data, schema), None, 0, 1, options)
            .with_context(|| format!("opening {}", data.display()))
    }
}

fn predict(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let objective = model.objective()?;
    let mut stream = model.stream(&args.data, false)?;
    let mut out = BufWriter::new(
        fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    let mut rows = 0u64;
    while let Some(batch) = stream.next_batch()? {
        for ex in &batch.examples {
            let scores = model.ensemble.predict(&ex.features, None)?;
            let mut cols: Vec<String> = scores.iter().map(f64::to_string).collect();
            if let Some(obj) = objective.as_ref().filter(|o| o.is_classification()) {
                cols.extend(obj.transform(&scores).iter().map(f64::to_string));
            }
            writeln!(out, "{}", cols.join("\t"))?;
            rows += 1;
        }
    }
    out.flush()?;
    info!("wrote {rows} predictions to {}", args.out.display());
    Ok(())
}

#[derive(Default)]
struct ClassCounts {
    actual: u64,
    predicted: u64,
    correct: u64,
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let Some(objective) = model.objective()? else {
        bail!("{CONFIG_FILE} not found beside the model; cannot tell which loss to report");
    };
    let mut stream = model.stream(&args.data, true)?;
    let (mut loss, mut weight, mut n) = (0.0, 0.0, 0u64);
    let mut classes: BTreeMap<usize, ClassCounts> = BTreeMap::new();
    while let Some(batch) = stream.next_batch()? {
        for ex in &batch.examples {
            let scores = model.ensemble.predict(&ex.features, None)?;
            loss += ex.weight * objective.example_loss(&scores, ex.label)?;
            weight += ex.weight;
            n += 1;
            if objective.is_classification() {
                let (y, p) = (ex.label as usize, objective.predicted_class(&scores));
                classes.entry(y).or_default().actual += 1;
                classes.entry(p).or_default().predicted += 1;
                if y == p {
                    classes.entry(y).or_default().correct += 1;
                }
            }
        }
    }
    if n == 0 {
        bail!("{} holds no examples", args.data.display());
    }
    println!("examples\t{n}");
    println!("loss\t{}", loss / weight);
    if objective.is_classification() {
        let correct: u64 = classes.values().map(|c| c.correct).sum();
        println!("accuracy\t{}", correct as f64 / n as f64);
        for (k, c) in &classes {
            println!(
                "class {k}\tactual={}\tpredicted={}\tcorrect={}",
                c.actual, c.predicted, c.correct
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TFBT_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
