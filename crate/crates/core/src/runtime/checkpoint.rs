//! Checkpoint directory layout:
//!
//! ```text
//! ensemble.tfbt   committed and partial trees (ensemble format)
//! growth.tfbt     "TFBG": round progress and open-leaf flags of the active trees
//! shard_<k>.tfbt  "TFBS": one parameter-server shard
//! MANIFEST        stamp, then `<file> <sha256>` per file; written last
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::cluster::Cluster;
use super::shard::PsShard;
use super::RuntimeError;
use crate::boosting::{
    ActiveRound, BoostConfig, DropoutDecision, Engine, ExampleCounter, ModelState, QuantileAcc,
    TrainError,
};
use crate::codec::{ByteReader, ByteWriter, LoadError};
use crate::histogram::{GradHessHistogram, SplitRecord};
use crate::quantile::QuantileSummary;
use crate::tree_model::{
    deserialize_ensemble, serialize_ensemble, GrowingMetadata, LeafValue, StampToken, TreeNode,
};

pub const MANIFEST: &str = "MANIFEST";
const GROWTH_MAGIC: &[u8; 4] = b"TFBG";
const SHARD_MAGIC: &[u8; 4] = b"TFBS";
const VERSION: u32 = 1;

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, dir.join(name))
}

fn encode_growth(state: &ModelState, num_features: usize) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(GROWTH_MAGIC);
    w.u32(VERSION);
    w.u64(num_features as u64);
    w.u32(state.rounds_completed);
    let Some(r) = &state.round else {
        w.u8(0);
        return w.finish();
    };
    w.u8(1);
    w.u32(r.index);
    w.u64(r.first_tree as u64);
    w.u64(r.count as u64);
    w.u32(r.layer_depth);
    for &d in &r.done {
        w.u8(d as u8);
    }
    w.len_u32(r.dropout.dropped.len());
    for &t in &r.dropout.dropped {
        w.u64(t as u64);
    }
    w.f64(r.dropout.normalization);
    w.len_u32(r.features.len());
    for &f in &r.features {
        w.u32(f);
    }
    for recs in &r.splits {
        w.len_u32(recs.len());
        for (node, rec) in recs {
            w.u32(*node);
            w.f64(rec.gain);
            w.f64s(rec.node_value.scores());
        }
    }
    for t in r.first_tree..r.first_tree + r.count {
        let nodes = state.ensemble.trees()[t].nodes();
        for n in nodes {
            w.u8(matches!(n, TreeNode::Leaf { finalized: true, .. }) as u8);
        }
    }
    w.finish()
}

fn invalid(m: impl Into<String>) -> LoadError {
    LoadError::Invalid(m.into())
}

fn decode_growth(
    bytes: &[u8],
    mut state: ModelState,
    num_features: usize,
) -> Result<ModelState, LoadError> {
    let mut r = ByteReader::new(bytes);
    r.magic(GROWTH_MAGIC)?;
    r.version(VERSION)?;
    let nf = r.u64()? as usize;
    if nf != num_features {
        return Err(invalid(format!(
            "checkpoint has {nf} features, configured {num_features}"
        )));
    }
    state.rounds_completed = r.u32()?;
    state.round = None;
    state.ensemble.growing = GrowingMetadata::default();
    if r.u8()? == 1 {
        let index = r.u32()?;
        let first_tree = r.u64()? as usize;
        let count = r.u64()? as usize;
        if first_tree + count != state.ensemble.len() {
            return Err(invalid("active trees do not end the ensemble"));
        }
        let layer_depth = r.u32()?;
        let done = (0..count)
            .map(|_| r.u8().map(|b| b != 0))
            .collect::<Result<Vec<_>, _>>()?;
        let n = r.count(8)?;
        let dropped: BTreeSet<usize> = (0..n)
            .map(|_| r.u64().map(|t| t as usize))
            .collect::<Result<_, _>>()?;
        let normalization = r.f64()?;
        let n = r.count(4)?;
        let features = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let mut splits = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.count(16)?;
            let mut recs = BTreeMap::new();
            for _ in 0..n {
                let node = r.u32()?;
                let gain = r.f64()?;
                let node_value = LeafValue::new(r.f64s()?).map_err(|e| invalid(e.to_string()))?;
                recs.insert(node, SplitRecord { gain, node_value });
            }
            splits.push(recs);
        }
        for t in first_tree..first_tree + count {
            let tree = state.ensemble.tree_mut(t);
            for idx in 0..tree.nodes().len() {
                let flag = r.u8()? != 0;
                if matches!(tree.nodes()[idx], TreeNode::Leaf { .. }) {
                    tree.set_finalized(idx as u32, flag);
                }
            }
        }
        state.ensemble.growing = GrowingMetadata {
            active_tree_index: Some(first_tree),
            active_layer_depth: layer_depth,
        };
        state.round = Some(ActiveRound {
            index,
            first_tree,
            count,
            layer_depth,
            done,
            dropout: DropoutDecision {
                dropped,
                normalization,
            },
            features,
            splits,
        });
    }
    r.finish()?;
    Ok(state)
}

fn encode_shard(shard: &PsShard) -> Vec<u8> {
    let (stamp, acc) = shard.quantiles.read();
    let (_, grad) = shard.grad.read();
    let (_, counter) = shard.counter.read();
    let mut w = ByteWriter::new();
    w.bytes(SHARD_MAGIC);
    w.u32(VERSION);
    w.i64(stamp.0);
    w.u64(shard.id as u64);
    w.len_u32(shard.owned.len());
    for &f in &shard.owned {
        w.u32(f);
    }
    w.len_u32(acc.summaries.len());
    for (f, s) in &acc.summaries {
        w.u32(*f);
        s.encode(&mut w);
    }
    w.len_u32(acc.boundaries.len());
    for (f, b) in &acc.boundaries {
        w.u32(*f);
        w.f64s(b);
    }
    match grad.as_ref() {
        Some(h) => {
            w.u8(1);
            h.encode(&mut w);
        }
        None => w.u8(0),
    }
    w.u64(counter.count);
    w.f64(counter.weight);
    w.finish()
}

fn decode_shard(bytes: &[u8]) -> Result<PsShard, LoadError> {
    let mut r = ByteReader::new(bytes);
    r.magic(SHARD_MAGIC)?;
    r.version(VERSION)?;
    let stamp = StampToken(r.i64()?);
    let id = r.u64()? as usize;
    let n = r.count(4)?;
    let owned = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let mut acc = QuantileAcc::default();
    for _ in 0..r.count(4)? {
        let f = r.u32()?;
        acc.summaries.insert(f, QuantileSummary::decode(&mut r)?);
    }
    for _ in 0..r.count(8)? {
        let f = r.u32()?;
        acc.boundaries.insert(f, r.f64s()?);
    }
    let grad = match r.u8()? {
        0 => None,
        1 => Some(GradHessHistogram::decode(&mut r)?),
        t => return Err(invalid(format!("bad histogram tag {t}"))),
    };
    let counter = ExampleCounter {
        count: r.u64()?,
        weight: r.f64()?,
    };
    r.finish()?;
    Ok(PsShard::with_state(id, owned, stamp, acc, grad, counter))
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the full cluster state. Takes the flush gate, so the snapshot
/// sits between two flushes with every resource at one stamp.
pub fn checkpoint(cluster: &Cluster, dir: &Path) -> Result<(), RuntimeError> {
    fs::create_dir_all(dir)?;
    let (stamp, files) = cluster.snapshot(|stamp, state, shards| {
        let mut files = vec![
            (
                "ensemble.tfbt".to_string(),
                serialize_ensemble(&state.ensemble, stamp),
            ),
            (
                "growth.tfbt".to_string(),
                encode_growth(state, cluster.engine().num_features()),
            ),
        ];
        for s in shards {
            files.push((format!("shard_{}.tfbt", s.id), encode_shard(s)));
        }
        (stamp, files)
    });
    let mut manifest = format!("stamp {}\n", stamp.0);
    for (name, bytes) in &files {
        write_atomic(dir, name, bytes)?;
        manifest.push_str(&format!("{name} {}\n", sha_hex(bytes)));
    }
    write_atomic(dir, MANIFEST, manifest.as_bytes())?;
    Ok(())
}

/// Rebuilds a cluster from [`checkpoint`] output. Every file is checked
/// against the manifest digest, and every resource must carry the
/// manifest stamp. A larger `num_trees` than the checkpointed run had
/// continues boosting after the existing trees.
pub fn restore(dir: &Path, config: BoostConfig, num_features: usize) -> Result<Cluster, RuntimeError> {
    let manifest = match fs::read_to_string(dir.join(MANIFEST)) {
        Ok(m) => m,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(RuntimeError::NoCheckpoint(dir.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut lines = manifest.lines();
    let stamp = lines
        .next()
        .and_then(|l| l.strip_prefix("stamp "))
        .and_then(|s| s.parse().ok())
        .map(StampToken)
        .ok_or_else(|| invalid("manifest lacks a stamp line"))?;
    let mut blobs = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (name, digest) = line
            .split_once(' ')
            .ok_or_else(|| invalid(format!("bad manifest line {line:?}")))?;
        if name.contains('/') || name.contains("..") {
            return Err(invalid(format!("bad file name {name:?}")).into());
        }
        let bytes = fs::read(dir.join(name))?;
        if sha_hex(&bytes) != digest {
            return Err(invalid(format!("{name} does not match its digest")).into());
        }
        blobs.insert(name.to_string(), bytes);
    }
    let take = |name: &str| {
        blobs
            .get(name)
            .ok_or_else(|| invalid(format!("manifest lacks {name}")))
    };
    let engine = Engine::new(config, num_features).map_err(TrainError::from)?;
    let (es, ensemble) = deserialize_ensemble(take("ensemble.tfbt")?)?;
    if es != stamp {
        return Err(invalid("ensemble stamp differs from the manifest").into());
    }
    let cfg = engine.config();
    if ensemble.num_classes() != cfg.num_classes || ensemble.strategy() != cfg.multiclass {
        return Err(RuntimeError::Config(
            "checkpoint was trained with different classes".into(),
        ));
    }
    let base = ModelState {
        ensemble,
        round: None,
        rounds_completed: 0,
    };
    let mut state = decode_growth(take("growth.tfbt")?, base, num_features)?;
    if state.round.is_none() && !engine.is_complete(&state) {
        // finished under a smaller tree budget: keep boosting past it
        state = engine.resume_state(state.ensemble, state.rounds_completed);
    }
    let mut shards = Vec::new();
    for k in 0.. {
        let Some(bytes) = blobs.get(&format!("shard_{k}.tfbt")) else {
            break;
        };
        let shard = decode_shard(bytes)?;
        if shard.id != k || shard.quantiles.stamp() != stamp {
            return Err(invalid(format!("shard_{k}.tfbt is inconsistent")).into());
        }
        shards.push(shard);
    }
    if shards.is_empty() {
        return Err(invalid("checkpoint has no shards").into());
    }
    Ok(Cluster::from_parts(engine, state, stamp, shards))
}
