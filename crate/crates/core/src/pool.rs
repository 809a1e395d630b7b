use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{Backbone, EncoderConfig, TokenSeq};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::prompt::{AlignerParams, PromptSet, TaskParams};
use crate::tensor::{cosine, Tensor};

const MAGIC: &[u8; 4] = b"CPP1";
const VERSION: u32 = 1;

/// How far a stored key's norm may drift from one before the pool treats
/// the data as corrupt.
const KEY_NORM_TOL: f64 = 1e-9;

/// Digest binding a pool to the exact encoder/prompt geometry it was
/// trained under. Pools refuse entries and files from other geometries.
pub fn config_digest(cfg: &EncoderConfig, depth: usize, plen: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"duet-config-v1");
    for v in [
        cfg.layers,
        cfg.heads,
        cfg.d_t,
        cfg.d_v,
        cfg.d_joint,
        cfg.vocab,
        cfg.max_tokens,
        cfg.image,
        cfg.patch,
        cfg.channels,
        depth,
        plen,
    ] {
        h.update((v as u64).to_le_bytes());
    }
    h.finalize().into()
}

/// Sum of already-encoded class embeddings, unit-normalized.
/// The caller fixes the summation order.
pub fn prototype_from_embeddings(embeddings: &[Tensor]) -> Result<Tensor> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::contract("prototype needs at least one class embedding".to_string()))?;
    let mut sum = Tensor::zeros(first.shape().to_vec());
    for e in embeddings {
        sum = sum.add(e)?;
    }
    sum.normalized().map_err(|_| {
        Error::contract("prototype is degenerate: class embeddings sum to (near) zero".to_string())
    })
}

/// Task prototype: encode every class name with the frozen backbone, sum
/// and unit-normalize. Summation runs over class names in lexicographic
/// token order, so permuting the class list changes nothing, bit for bit.
pub fn extract_prototype(backbone: &Backbone, class_names: &[TokenSeq]) -> Result<Tensor> {
    if class_names.is_empty() {
        return Err(Error::contract(
            "prototype needs at least one class name".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..class_names.len()).collect();
    order.sort_by(|&a, &b| class_names[a].cmp(&class_names[b]));
    let mut embeddings = Vec::with_capacity(class_names.len());
    for &i in &order {
        embeddings.push(backbone.base_text_encode(&class_names[i])?);
    }
    prototype_from_embeddings(&embeddings)
}

/// One trained task: its identifier, prototype key and prompt parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub task_id: String,
    pub key: Tensor,
    pub params: TaskParams,
}

/// What a similarity query decided.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QueryOutcome {
    /// Best key at `index` cleared the threshold.
    Retrieved { index: usize, sim: f64 },
    /// No key cleared it (or the pool is empty): use the base model.
    Fallback { best: Option<(usize, f64)> },
}

/// Ordered collection of task entries keyed by unit-norm prototypes,
/// locked to one configuration digest.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    digest: [u8; 32],
    entries: Vec<PoolEntry>,
}

impl PromptPool {
    pub fn new(digest: [u8; 32]) -> Self {
        PromptPool {
            digest,
            entries: Vec::new(),
        }
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> Result<&PoolEntry> {
        self.entries
            .get(index)
            .ok_or_else(|| Error::contract(format!("pool has no entry {index}")))
    }

    /// Appends a task entry; ids must be unique and keys unit-norm.
    pub fn add(&mut self, entry: PoolEntry) -> Result<()> {
        if entry.task_id.is_empty() {
            return Err(Error::contract("task id must be non-empty".to_string()));
        }
        if self.entries.iter().any(|e| e.task_id == entry.task_id) {
            return Err(Error::contract(format!(
                "task {:?} already in pool",
                entry.task_id
            )));
        }
        if entry.key.rank() != 1 {
            return Err(Error::shape(
                "pool_add",
                format!("key must be rank 1, got {:?}", entry.key.shape()),
            ));
        }
        if (entry.key.norm() - 1.0).abs() > KEY_NORM_TOL {
            return Err(Error::contract(format!(
                "key for {:?} is not unit-norm (norm {})",
                entry.task_id,
                entry.key.norm()
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Max-cosine scan in entry order; strict `>` keeps the lowest index on
    /// ties. Retrieval requires the best similarity to reach `gamma`;
    /// thresholds above one therefore always fall back.
    pub fn query(&self, query: &Tensor, gamma: f64) -> Result<QueryOutcome> {
        if !gamma.is_finite() {
            return Err(Error::contract(format!(
                "threshold must be finite, got {gamma}"
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let sim = cosine(query, &e.key)?;
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((i, sim));
            }
        }
        Ok(match best {
            Some((index, sim)) if sim >= gamma => QueryOutcome::Retrieved { index, sim },
            other => QueryOutcome::Fallback { best: other },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&self.digest);
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            let id = e.task_id.as_bytes();
            w.u16(id.len() as u16);
            w.bytes(id);
            w.tensor(&e.key);
            w.tensor(e.params.prompts.text());
            w.tensor(e.params.prompts.vis());
            w.tensor(e.params.aligner.v2t());
            w.tensor(e.params.aligner.t2v());
        }
        w.into_vec()
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32)?);
        let count = r.u32()?;
        let mut pool = PromptPool::new(digest);
        for _ in 0..count {
            let id_len = r.u16()? as usize;
            let id_bytes = r.take(id_len)?;
            let task_id = std::str::from_utf8(id_bytes)
                .map_err(|_| r.error("task id is not valid UTF-8"))?
                .to_string();
            let key = r.tensor()?;
            let text = r.tensor()?;
            let vis = r.tensor()?;
            let v2t = r.tensor()?;
            let t2v = r.tensor()?;
            if text.rank() != 3 {
                return Err(r.error(format!(
                    "prompt tensor for {task_id:?} must be rank 3, got {:?}",
                    text.shape()
                )));
            }
            let depth = text.shape()[0];
            let plen = text.shape()[1];
            let prompts = PromptSet::new(depth, plen, text, vis)
                .map_err(|e| r.error(format!("entry {task_id:?}: {e}")))?;
            let aligner = AlignerParams::new(depth, v2t, t2v)
                .map_err(|e| r.error(format!("entry {task_id:?}: {e}")))?;
            pool.add(PoolEntry {
                task_id: task_id.clone(),
                key,
                params: TaskParams { prompts, aligner },
            })
            .map_err(|e| r.error(format!("entry {task_id:?}: {e}")))?;
        }
        r.finish()?;
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
