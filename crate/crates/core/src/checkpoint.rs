//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MFTC" | u32 version | u64 meta_len | meta (JSON)
//! u32 tensor_count | per tensor: u32 name_len, name, u32 rank, u64 dims[rank], u64 offset
//! u64 payload_len | payload (f32 LE)
//! ```
//!
//! Offsets are byte positions within the payload. There is no checksum.

use std::collections::HashMap;
use std::path::Path;

use mft_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::NormStats;
use crate::error::{CoreError, Result};
use crate::masking::MaskStrategy;
use crate::model::{param_shapes, ViTModel};
use crate::objectives::DistillConfig;
use crate::schedule::PruneSchedule;

pub const MAGIC: [u8; 4] = *b"MFTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub mask: MaskStrategy,
    pub distill: DistillConfig,
    pub epochs: usize,
    pub seed: u64,
    /// `full`, `masked-single` or `masked-hybrid`.
    pub training_kind: String,
    pub norm: NormStats,
    #[serde(default)]
    pub dataset: String,
    /// Set for models fine-tuned under token pruning.
    #[serde(default)]
    pub prune: Option<PruneSchedule>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, mask: MaskStrategy, norm: NormStats, seed: u64) -> Self {
        let training_kind = mask.training_kind().to_string();
        Self {
            model,
            mask,
            distill: DistillConfig::default(),
            epochs: 0,
            seed,
            training_kind,
            norm,
            dataset: String::new(),
            prune: None,
        }
    }
}

pub fn to_bytes(model: &ViTModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    model.config.ensure_matches(&meta.model)?;
    let meta_json = serde_json::to_vec(meta)?;
    let entries = model.params.entries();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += t.numel() as u64 * 4;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CoreError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| CoreError::Truncated(what))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ViTModel, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CoreError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CoreError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = r.len("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    meta.model.validate()?;

    let count = r.u32("tensor count")? as usize;
    let mut index = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("tensor name")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| CoreError::Data("tensor name is not UTF-8".into()))?;
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(CoreError::Data(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len("tensor dims")).collect::<Result<Vec<_>>>()?;
        let offset = r.len("tensor offset")?;
        index.push((name, shape, offset));
    }
    let payload_len = r.len("payload length")?;
    let payload = r.take(payload_len, "payload")?;

    let expected = param_shapes(&meta.model);
    let known: HashMap<String, &Vec<usize>> = expected.entries().into_iter().collect();
    let mut loaded: HashMap<String, Tensor> = HashMap::new();
    let mut total = 0usize;
    for (name, shape, offset) in index {
        let want = *known.get(&name).ok_or_else(|| CoreError::UnknownTensor(name.clone()))?;
        if &shape != want {
            return Err(CoreError::TensorShape {
                name,
                expected: want.clone(),
                found: shape,
            });
        }
        let n: usize = shape.iter().product();
        let bytes = payload
            .get(offset..offset + n * 4)
            .ok_or(CoreError::Truncated("payload"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        total += n * 4;
        if loaded.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(CoreError::Data(format!("tensor `{name}` appears twice")));
        }
    }
    if total != payload_len {
        return Err(CoreError::Data(format!(
            "payload is {payload_len} bytes but tensors cover {total}"
        )));
    }
    let params = expected.try_map(|name, _| {
        loaded
            .remove(name)
            .ok_or_else(|| CoreError::MissingTensor(name.to_string()))
    })?;
    Ok((
        ViTModel {
            config: meta.model.clone(),
            params,
        },
        meta,
    ))
}

pub fn save_checkpoint(model: &ViTModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ViTModel, CheckpointMeta)> {
    let bytes = std::fs::read(path)
        .map_err(|e| CoreError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint that must have been produced under `config`.
pub fn load_for(path: &Path, config: &ModelConfig) -> Result<(ViTModel, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    config.ensure_matches(&model.config)?;
    Ok((model, meta))
}
