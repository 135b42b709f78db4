//! Checkpoint container: magic "IMB1", an 8-byte little-endian header
//! length, a JSON header mapping tensor name -> {dtype, shape, offset,
//! len} plus a "meta" entry (configs, vocab, label map, step), then the
//! raw little-endian f32 tensor bytes at the stated offsets.
//!
//! Weights are stored at f32 precision regardless of the training
//! scalar type; a load(save(x)) round trip is bit-exact at that
//! precision.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{LabelMap, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"IMB1";

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub vocab: Vocab,
    pub label_map: LabelMap,
    pub train_config: TrainConfig,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header: BTreeMap<String, serde_json::Value> = BTreeMap::new();
        let mut blob: Vec<u8> = Vec::new();
        for (name, tensor) in self.model.params.iter() {
            let bytes: Vec<u8> = tensor
                .to_f32_vec()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            let entry = TensorEntry {
                dtype: "f32".into(),
                shape: tensor.shape().to_vec(),
                offset: blob.len(),
                len: bytes.len(),
            };
            blob.extend_from_slice(&bytes);
            header.insert(name.to_string(), serde_json::to_value(entry).unwrap());
        }
        header.insert(
            "meta".into(),
            json!({
                "config": {
                    "model": self.model.config,
                    "train": self.train_config,
                },
                "vocab": self.vocab.tokens(),
                "label_map": self.label_map.to_json(),
                "step": self.step,
            }),
        );
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header_bytes.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&blob);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint<T>> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        if bytes.len() < 12 {
            return Err(Error::Checkpoint("file too short for magic and header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:02x?}, expected {MAGIC:02x?}",
                &bytes[..4]
            )));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let mut header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[12..header_end])
                .map_err(|e| Error::Checkpoint(format!("header parse failure: {e}")))?;
        let meta = header
            .remove("meta")
            .ok_or_else(|| Error::Checkpoint("header is missing 'meta'".into()))?;

        let model_config: ModelConfig = serde_json::from_value(meta["config"]["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let train_config: TrainConfig = serde_json::from_value(meta["config"]["train"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad train config: {e}")))?;
        let tokens: Vec<String> = serde_json::from_value(meta["vocab"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad vocab: {e}")))?;
        let vocab = Vocab::from_tokens(tokens)
            .map_err(|e| Error::Checkpoint(format!("bad vocab: {e}")))?;
        let label_map = LabelMap::from_json(&meta["label_map"])
            .map_err(|e| Error::Checkpoint(format!("bad label map: {e}")))?;
        let step = meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("bad step".into()))?;

        let mut model: Model<T> = Model::init(model_config, 0)?;
        let blob = &bytes[header_end..];
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let value = header.remove(name).ok_or_else(|| {
                Error::Checkpoint(format!("tensor '{name}' missing from checkpoint"))
            })?;
            let entry: TensorEntry = serde_json::from_value(value)
                .map_err(|e| Error::Checkpoint(format!("bad entry for '{name}': {e}")))?;
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has unsupported dtype {}",
                    entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.len != numel * 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' length {} does not match shape {:?}",
                    entry.len, entry.shape
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.len)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' is truncated")))?;
            let values: Vec<f32> = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            model
                .params
                .set_tensor(name, Tensor::from_f32_vec(entry.shape, &values)?)?;
        }
        if !header.is_empty() {
            let extra: Vec<&String> = header.keys().collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint carries unexpected tensors: {extra:?}"
            )));
        }
        Ok(Checkpoint {
            model,
            vocab,
            label_map,
            train_config,
            step,
        })
    }

    /// Weights as they survive the f32 storage round trip, without
    /// touching the filesystem.
    pub fn quantized_to_f32(&self) -> Checkpoint<T> {
        let mut out = Checkpoint {
            model: self.model.snapshot(),
            vocab: self.vocab.clone(),
            label_map: self.label_map.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
        };
        let names: Vec<String> = out.model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = out.model.params.get(&name).unwrap();
            let rounded =
                Tensor::from_f32_vec(t.shape().to_vec(), &t.to_f32_vec()).expect("same shape");
            out.model.params.set_tensor(&name, rounded).unwrap();
        }
        out
    }
}
