//! Per-example attention dumps: a JSON sidecar (segment map, phrase spans,
//! gold boxes) and a binary tensor blob with a layer/head/len header and
//! 32-bit float weights. See `docs/attention_dump.md`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scene::PhraseSpan;
use crate::{CoreError, Result};

use super::record::{AttentionRecord, LayerAttention};
use super::segmap::ModalitySegmentMap;

const MAGIC: &[u8; 8] = b"VEFATTN1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub example_id: u64,
    pub segmap: ModalitySegmentMap,
    pub phrases: Vec<PhraseSpan>,
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
}

/// Write `{base}.json` + `{base}.attn` for one captured example.
pub fn write_attention_dump(
    base: &Path,
    record: &AttentionRecord<f64>,
    phrases: &[PhraseSpan],
) -> Result<()> {
    let first = record
        .layers
        .first()
        .ok_or_else(|| CoreError::Data("empty attention record".into()))?;
    let sidecar = DumpSidecar {
        example_id: record.example_id,
        segmap: record.segmap.clone(),
        phrases: phrases.to_vec(),
        layers: record.layers.len(),
        heads: first.heads,
        len: first.len,
    };
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;

    let mut f = fs::File::create(base.with_extension("attn"))?;
    f.write_all(MAGIC)?;
    for v in [sidecar.layers as u32, sidecar.heads as u32, sidecar.len as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for layer in &record.layers {
        for &w in layer.weights() {
            f.write_all(&(w as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a dump back; weights come back as the f32 they were stored as.
pub fn read_attention_dump(base: &Path) -> Result<(AttentionRecord<f32>, DumpSidecar)> {
    let sidecar: DumpSidecar =
        serde_json::from_str(&fs::read_to_string(base.with_extension("json"))?)?;
    let mut f = fs::File::open(base.with_extension("attn"))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Data("bad attention dump magic".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |f: &mut fs::File| -> Result<usize> {
        f.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf) as usize)
    };
    let layers = read_u32(&mut f)?;
    let heads = read_u32(&mut f)?;
    let len = read_u32(&mut f)?;
    if layers != sidecar.layers || heads != sidecar.heads || len != sidecar.len {
        return Err(CoreError::Data("attention dump header disagrees with sidecar".into()));
    }

    let mut out_layers = Vec::with_capacity(layers);
    let mut buf = vec![0u8; heads * len * len * 4];
    for _ in 0..layers {
        f.read_exact(&mut buf)?;
        let weights = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out_layers.push(LayerAttention::new(heads, len, weights));
    }
    let record = AttentionRecord {
        example_id: sidecar.example_id,
        segmap: sidecar.segmap.clone(),
        layers: out_layers,
    };
    Ok((record, sidecar))
}
