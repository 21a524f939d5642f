//! Binary checkpoints: `VINIL1\0`, a u32 tensor count, then per tensor the
//! name length, UTF-8 name, rank, dims (all u32 LE) and f64 LE payload.
//! A JSON sidecar next to the file summarizes its contents.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vinil_tensor::Tensor;

use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelState};
use crate::strategies::{EwcState, MemoryBuffer, MemoryItem, StrategyState};

pub const MAGIC: &[u8; 7] = b"VINIL1\0";

const ANCHOR: &str = "ewc.theta_prev.";
const IMPORTANCE: &str = "ewc.importance.";
const MEM_IMAGES: &str = "memory.images";
const MEM_LABELS: &str = "memory.labels";
const MEM_TASKS: &str = "memory.tasks";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub num_instances: usize,
    pub tensors: usize,
    pub ewc_anchored: bool,
    pub buffer_size: usize,
    /// Stored items per task id.
    pub buffer_per_task: BTreeMap<usize, usize>,
    pub labeled_memory: bool,
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a checkpoint"));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint { offset: start as u64, msg: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| r.fail("payload too large"))?, "payload")?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint { offset: start as u64, msg: e.to_string() })?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint { offset: start as u64, msg: format!("duplicate tensor `{name}`") });
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn strategy_tensors(state: &StrategyState, out: &mut BTreeMap<String, Tensor>) -> Result<()> {
    for (k, t) in &state.ewc.theta_prev {
        out.insert(format!("{ANCHOR}{k}"), t.clone());
    }
    for (k, t) in &state.ewc.importance {
        out.insert(format!("{IMPORTANCE}{k}"), t.clone());
    }
    let items = &state.memory.items;
    if !items.is_empty() {
        let images: Vec<&Tensor> = items.iter().map(|m| &m.image).collect();
        out.insert(MEM_IMAGES.into(), Tensor::stack(&images)?);
        out.insert(MEM_TASKS.into(), Tensor::vector(items.iter().map(|m| m.task_id as f64).collect()));
        if let Some(labels) = items.iter().map(|m| m.label.map(|l| l as f64)).collect::<Option<Vec<_>>>() {
            out.insert(MEM_LABELS.into(), Tensor::vector(labels));
        }
    }
    Ok(())
}

/// Writes the checkpoint and its sidecar; returns the sidecar contents.
pub fn save_checkpoint(model: &ModelState, state: &StrategyState, path: &Path) -> Result<CheckpointMeta> {
    let mut tensors = model.params().clone();
    strategy_tensors(state, &mut tensors)?;
    fs::write(path, encode_tensors(&tensors)).map_err(|e| Error::io(path, e))?;
    let mut per_task = BTreeMap::new();
    for m in &state.memory.items {
        *per_task.entry(m.task_id).or_insert(0) += 1;
    }
    let meta = CheckpointMeta {
        model: model.config().clone(),
        num_instances: model.num_instances(),
        tensors: tensors.len(),
        ewc_anchored: !state.ewc.is_empty(),
        buffer_size: state.memory.len(),
        buffer_per_task: per_task,
        labeled_memory: state.memory.items.first().is_some_and(|m| m.label.is_some()),
    };
    let side = meta_path(path);
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = meta_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn as_index(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint { offset: 0, msg: format!("{what} entry {v} is not an index") })
    }
}

/// Restores a model built for `config` plus the strategy state.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<(ModelState, StrategyState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut tensors = decode_tensors(&bytes)?;
    let mut ewc = EwcState::default();
    let mut params = BTreeMap::new();
    let images = tensors.remove(MEM_IMAGES);
    let tasks = tensors.remove(MEM_TASKS);
    let labels = tensors.remove(MEM_LABELS);
    for (k, t) in tensors {
        if let Some(p) = k.strip_prefix(ANCHOR) {
            ewc.theta_prev.insert(p.to_string(), t);
        } else if let Some(p) = k.strip_prefix(IMPORTANCE) {
            ewc.importance.insert(p.to_string(), t);
        } else {
            params.insert(k, t);
        }
    }
    if ewc.theta_prev.keys().ne(ewc.importance.keys()) {
        return Err(Error::Checkpoint { offset: 0, msg: "EwC anchors and importances name different parameters".into() });
    }
    let model = ModelState::from_params(config.clone(), params)?;
    let mut memory = MemoryBuffer::default();
    match (images, tasks) {
        (None, None) if labels.is_none() => {}
        (Some(images), Some(tasks)) => {
            let n = images.shape()[0];
            if tasks.numel() != n || labels.as_ref().is_some_and(|l| l.numel() != n) {
                return Err(Error::Checkpoint { offset: 0, msg: format!("memory holds {n} images but mismatched task/label counts") });
            }
            for i in 0..n {
                memory.items.push(MemoryItem {
                    image: Tensor::new(images.shape()[1..].to_vec(), images.row(i).to_vec())?,
                    label: labels.as_ref().map(|l| as_index(l.data()[i], "memory label")).transpose()?,
                    task_id: as_index(tasks.data()[i], "memory task")?,
                });
            }
        }
        _ => return Err(Error::Checkpoint { offset: 0, msg: "incomplete replay memory".into() }),
    }
    Ok((model, StrategyState { ewc, memory }))
}
