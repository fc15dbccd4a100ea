use std::fmt::Write as _;
use std::str::FromStr;

use super::DataError;
use crate::boosting::{BoostConfig, CountGating, GrowthMode, Pruning, QuantileCarry};
use crate::losses::LossSpec;
use crate::tree_model::MulticlassStrategy;

/// Everything a training run reads from its config file.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub boost: BoostConfig,
    pub n_workers: u32,
    pub n_shards: u32,
    pub batch_size: usize,
    /// 0 cycles over the data until training completes.
    pub epochs: u32,
    pub shuffle_seed: Option<u64>,
    pub skip_bad_rows: bool,
    pub label_column: String,
    pub weight_column: Option<String>,
    pub num_features: Option<usize>,
    /// Flushes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            boost: BoostConfig::default(),
            n_workers: 1,
            n_shards: 4,
            batch_size: 256,
            epochs: 0,
            shuffle_seed: None,
            skip_bad_rows: false,
            label_column: "label".into(),
            weight_column: None,
            num_features: None,
            checkpoint_every: 0,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse()
        .map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn optional(v: &str) -> Option<&str> {
    (!v.is_empty() && v != "none").then_some(v)
}

impl TrainConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let b = &mut self.boost;
        let v = value.trim();
        match key {
            "mode" => {
                b.mode = match v {
                    "standard" => GrowthMode::Standard,
                    "layer_by_layer" => GrowthMode::LayerByLayer,
                    _ => return Err(format!("mode: unknown value {v:?}")),
                }
            }
            "loss" => b.loss = LossSpec::from_name(v, b.num_classes).map_err(|e| e.to_string())?,
            "num_classes" => {
                b.num_classes = num(key, v)?;
                if b.loss.name() == "softmax" {
                    b.loss = LossSpec::softmax(b.num_classes).map_err(|e| e.to_string())?;
                }
            }
            "multiclass" => {
                b.multiclass = match v {
                    "none" => MulticlassStrategy::None,
                    "one_vs_rest" => MulticlassStrategy::OneVsRest,
                    "per_class_leaves" => MulticlassStrategy::PerClassLeaves,
                    _ => return Err(format!("multiclass: unknown value {v:?}")),
                }
            }
            "num_trees" => b.num_trees = num(key, v)?,
            "max_depth" => b.max_depth = num(key, v)?,
            "learning_rate" => b.learning_rate = num(key, v)?,
            "examples_per_layer" => b.examples_per_layer = num(key, v)?,
            "l1" => b.reg.l1 = num(key, v)?,
            "l2" => b.reg.l2 = num(key, v)?,
            "tree_complexity" => b.reg.tree_complexity = num(key, v)?,
            "min_node_weight" => b.reg.min_node_weight = num(key, v)?,
            "dropout" => b.dropout = num(key, v)?,
            "feature_fraction" => b.feature_fraction = num(key, v)?,
            "example_fraction" => b.example_fraction = num(key, v)?,
            "line_search" => b.line_search = flag(key, v)?,
            "pruning" => {
                b.pruning = match v {
                    "pre" => Pruning::Pre,
                    "post" => Pruning::Post,
                    _ => return Err(format!("pruning: unknown value {v:?}")),
                }
            }
            "num_buckets" => b.num_buckets = num(key, v)?,
            "epsilon" => b.epsilon = num(key, v)?,
            "seed" => b.seed = num(key, v)?,
            "quantile_carry" => {
                b.quantile_carry = match v {
                    "per_tree" => QuantileCarry::PerTree,
                    "always" => QuantileCarry::Always,
                    _ => return Err(format!("quantile_carry: unknown value {v:?}")),
                }
            }
            "count_gating" => {
                b.count_gating = match v {
                    "examples" => CountGating::Examples,
                    "weight" => CountGating::Weight,
                    _ => return Err(format!("count_gating: unknown value {v:?}")),
                }
            }
            "n_workers" => self.n_workers = num(key, v)?,
            "n_shards" => self.n_shards = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "shuffle_seed" => self.shuffle_seed = optional(v).map(|s| num(key, s)).transpose()?,
            "skip_bad_rows" => self.skip_bad_rows = flag(key, v)?,
            "label_column" => self.label_column = v.to_string(),
            "weight_column" => self.weight_column = optional(v).map(str::to_string),
            "num_features" => self.num_features = optional(v).map(|s| num(key, s)).transpose()?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.boost.validate().map_err(|e| e.to_string())?;
        if self.n_workers == 0 || self.n_shards == 0 || self.batch_size == 0 {
            return Err("n_workers, n_shards and batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Parses flat `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<TrainConfig, DataError> {
    let mut cfg = TrainConfig::default();
    // loss depends on num_classes, so apply it last
    let mut loss = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::parse(line_no, format!("expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "loss" {
            loss = Some((line_no, v.to_string()));
            continue;
        }
        cfg.set(k, v).map_err(|m| DataError::parse(line_no, m))?;
    }
    if let Some((line_no, v)) = loss {
        cfg.set("loss", &v).map_err(|m| DataError::parse(line_no, m))?;
    }
    Ok(cfg)
}

fn enum_name<T: PartialEq>(v: T, names: &[(T, &'static str)]) -> &'static str {
    names.iter().find(|(t, _)| *t == v).map(|(_, n)| *n).unwrap()
}

/// Inverse of [`parse_config`] for built-in losses.
pub fn render_config(cfg: &TrainConfig) -> String {
    let b = &cfg.boost;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv(
        "mode",
        enum_name(
            b.mode,
            &[
                (GrowthMode::Standard, "standard"),
                (GrowthMode::LayerByLayer, "layer_by_layer"),
            ],
        )
        .into(),
    );
    kv("num_classes", b.num_classes.to_string());
    kv(
        "multiclass",
        enum_name(
            b.multiclass,
            &[
                (MulticlassStrategy::None, "none"),
                (MulticlassStrategy::OneVsRest, "one_vs_rest"),
                (MulticlassStrategy::PerClassLeaves, "per_class_leaves"),
            ],
        )
        .into(),
    );
    kv("loss", b.loss.name().into());
    kv("num_trees", b.num_trees.to_string());
    kv("max_depth", b.max_depth.to_string());
    kv("learning_rate", b.learning_rate.to_string());
    kv("examples_per_layer", b.examples_per_layer.to_string());
    kv("l1", b.reg.l1.to_string());
    kv("l2", b.reg.l2.to_string());
    kv("tree_complexity", b.reg.tree_complexity.to_string());
    kv("min_node_weight", b.reg.min_node_weight.to_string());
    kv("dropout", b.dropout.to_string());
    kv("feature_fraction", b.feature_fraction.to_string());
    kv("example_fraction", b.example_fraction.to_string());
    kv("line_search", b.line_search.to_string());
    kv(
        "pruning",
        enum_name(b.pruning, &[(Pruning::Pre, "pre"), (Pruning::Post, "post")]).into(),
    );
    kv("num_buckets", b.num_buckets.to_string());
    kv("epsilon", b.epsilon.to_string());
    kv("seed", b.seed.to_string());
    kv(
        "quantile_carry",
        enum_name(
            b.quantile_carry,
            &[
                (QuantileCarry::PerTree, "per_tree"),
                (QuantileCarry::Always, "always"),
            ],
        )
        .into(),
    );
    kv(
        "count_gating",
        enum_name(
            b.count_gating,
            &[
                (CountGating::Examples, "examples"),
                (CountGating::Weight, "weight"),
            ],
        )
        .into(),
    );
    kv("n_workers", cfg.n_workers.to_string());
    kv("n_shards", cfg.n_shards.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("epochs", cfg.epochs.to_string());
    kv(
        "shuffle_seed",
        cfg.shuffle_seed.map_or("none".into(), |s| s.to_string()),
    );
    kv("skip_bad_rows", cfg.skip_bad_rows.to_string());
    kv("label_column", cfg.label_column.clone());
    kv(
        "weight_column",
        cfg.weight_column.clone().unwrap_or_else(|| "none".into()),
    );
    kv(
        "num_features",
        cfg.num_features.map_or("none".into(), |n| n.to_string()),
    );
    kv("checkpoint_every", cfg.checkpoint_every.to_string());
    s
}
