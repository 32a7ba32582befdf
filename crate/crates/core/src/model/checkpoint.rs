//! Checkpoint directory: `manifest.json` describing every tensor plus
//! `weights.bin` holding them back to back as little-endian values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, ModelSpec, Result};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    /// Seed of the data stream the weights were trained on, if any.
    #[serde(default)]
    pub data_seed: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(ckpt_err(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Writes `model` to `dir`, creating it if needed.
pub fn save_checkpoint<T: Real>(
    model: &Model<T>,
    dir: &Path,
    data_seed: Option<u64>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(model.param_len() * T::BYTES);
    let mut tensors = Vec::new();
    for (name, t) in model.named_params() {
        let offset = bytes.len() as u64;
        t.data().iter().for_each(|&v| v.write_le(&mut bytes));
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            byte_offset: offset,
            byte_length: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        seed: model.seed,
        data_seed,
        tensors,
    };
    fs::write(dir.join(WEIGHTS), &bytes)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST), json)?;
    Ok(manifest)
}

fn decode<T: Real, S: Real>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(S::BYTES)
        .map(|c| T::of(S::read_le(c).to_f64().unwrap_or(f64::NAN)))
        .collect()
}

/// Loads a checkpoint, converting stored values to `T` when the dtypes differ.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Model<T>, Manifest)> {
    let manifest = Manifest::read(dir)?;
    let bytes = fs::read(dir.join(WEIGHTS))?;
    let mut model = Model::<T>::build(&manifest.spec, manifest.seed)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.tensors.len() {
        return Err(ckpt_err(format!(
            "spec has {} tensors, manifest lists {}",
            names.len(),
            manifest.tensors.len()
        )));
    }
    for ((name, slot), entry) in names.iter().zip(model.params_mut()).zip(&manifest.tensors) {
        if *name != entry.name {
            return Err(ckpt_err(format!(
                "expected tensor {name}, found {}",
                entry.name
            )));
        }
        if slot.shape() != entry.shape.as_slice() {
            return Err(ckpt_err(format!(
                "{name}: shape {:?} does not match spec shape {:?}",
                entry.shape,
                slot.shape()
            )));
        }
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(ckpt_err(format!("{name}: unknown dtype {other:?}"))),
        };
        let expected = (slot.len() * width) as u64;
        let end = entry.byte_offset.checked_add(entry.byte_length);
        if entry.byte_length != expected || end.is_none_or(|e| e > bytes.len() as u64) {
            return Err(ckpt_err(format!(
                "{name}: byte range {}+{} invalid for {} values in a {}-byte file",
                entry.byte_offset,
                entry.byte_length,
                slot.len(),
                bytes.len()
            )));
        }
        let raw =
            &bytes[entry.byte_offset as usize..(entry.byte_offset + entry.byte_length) as usize];
        let data = if width == 4 {
            decode::<T, f32>(raw)
        } else {
            decode::<T, f64>(raw)
        };
        *slot =
            Tensor::new(entry.shape.clone(), data).map_err(|e| ckpt_err(format!("{name}: {e}")))?;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, RankConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, _) = ModelSpec::reference(32).with_ranks(&RankConfig::new(16, 16, 3, 3));
        let model = build_model(&spec, 42).unwrap();
        let m = save_checkpoint(&model, dir.path(), Some(9)).unwrap();
        let (back, m2) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.data_seed, Some(9));
        for (a, b) in model.params().iter().zip(back.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let total: u64 = m.tensors.iter().map(|t| t.byte_length).sum();
        assert_eq!(total, fs::metadata(dir.path().join(WEIGHTS)).unwrap().len());
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&ModelSpec::reference(16), 1).unwrap();
        save_checkpoint(&model, dir.path(), None).unwrap();
        let path = dir.path().join(WEIGHTS);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&ModelSpec::reference(16), 1).unwrap();
        save_checkpoint(&model, dir.path(), None).unwrap();
        let (back, _) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(back.cast::<f32>(), model);
    }
}
