//! Checkpoints: a JSON manifest naming every parameter (shape + offset)
//! plus a flat little-endian f64 blob. Identical parameters produce
//! byte-identical files; no timestamps live here.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::VeConfig;
use crate::scene::TaskKind;
use crate::tensor::{ParamSet, Tensor};
use crate::{CoreError, Result};

use super::{FusionModel, ModelConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub ve_config: VeConfig,
    pub task: TaskKind,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 values into the blob.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

/// Write `{base}.json` and `{base}.bin`.
pub fn save_checkpoint(base: &Path, model: &FusionModel, meta: &CheckpointMeta) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (_, p) in model.params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.value.numel();
    }
    let manifest = Manifest {
        format: "vefusion-checkpoint-v1".to_string(),
        meta: meta.clone(),
        params: entries,
    };
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(base.with_extension("json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    fs::write(base.with_extension("bin"), blob)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(base: &Path) -> Result<(FusionModel, CheckpointMeta)> {
    let manifest_path = base.with_extension("json");
    let blob_path = base.with_extension("bin");
    if !manifest_path.exists() || !blob_path.exists() {
        return Err(CoreError::MissingInput(format!(
            "checkpoint files {} / {}",
            manifest_path.display(),
            blob_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format != "vefusion-checkpoint-v1" {
        return Err(CoreError::Incompatible(format!(
            "unknown checkpoint format `{}`",
            manifest.format
        )));
    }
    let blob = fs::read(&blob_path)?;
    let total_values = blob.len() / 8;

    let mut params = ParamSet::new();
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        if e.offset + numel > total_values {
            return Err(CoreError::Incompatible(format!(
                "checkpoint blob too short for parameter `{}`",
                e.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = (e.offset + i) * 8;
            let bytes: [u8; 8] = blob[at..at + 8].try_into().expect("8-byte slice");
            data.push(f64::from_le_bytes(bytes));
        }
        params.add(e.name.clone(), Tensor::new(e.shape.clone(), data));
    }
    let model = FusionModel::from_parts(manifest.meta.model.clone(), params)?;
    Ok((model, manifest.meta))
}
