//! Binary token-cache format: header (kind / count / dim), then row-major
//! 64-bit features, then per-token footprints with a padding flag.
//! See `docs/cache_format.md` for the byte-level layout.

use std::io::{Read, Write};

use crate::geometry::BBox;
use crate::{CoreError, Result};

use super::{VeKind, VisualToken, VisualTokenSet};

const MAGIC: &[u8; 8] = b"VEFCACH1";

fn kind_code(kind: VeKind) -> u8 {
    match kind {
        VeKind::Region => 0,
        VeKind::Grid => 1,
        VeKind::Patch => 2,
    }
}

fn kind_from_code(code: u8) -> Result<VeKind> {
    match code {
        0 => Ok(VeKind::Region),
        1 => Ok(VeKind::Grid),
        2 => Ok(VeKind::Patch),
        other => Err(CoreError::Data(format!("unknown encoder code {other} in cache"))),
    }
}

pub fn write_token_cache(mut w: impl Write, set: &VisualTokenSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[kind_code(set.kind)])?;
    w.write_all(&(set.tokens.len() as u32).to_le_bytes())?;
    w.write_all(&(set.feature_dim as u32).to_le_bytes())?;
    for t in &set.tokens {
        debug_assert_eq!(t.features.len(), set.feature_dim);
        for v in &t.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for t in &set.tokens {
        for v in [t.footprint.x, t.footprint.y, t.footprint.w, t.footprint.h] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[t.is_padding as u8])?;
    }
    Ok(())
}

pub fn read_token_cache(mut r: impl Read) -> Result<VisualTokenSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Data("bad token cache magic".into()));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let kind = kind_from_code(byte[0])?;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;

    let mut f64buf = [0u8; 8];
    let mut features = Vec::with_capacity(count);
    for _ in 0..count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut f64buf)?;
            row.push(f64::from_le_bytes(f64buf));
        }
        features.push(row);
    }
    let mut tokens = Vec::with_capacity(count);
    for row in features {
        let mut coords = [0.0; 4];
        for c in coords.iter_mut() {
            r.read_exact(&mut f64buf)?;
            *c = f64::from_le_bytes(f64buf);
        }
        r.read_exact(&mut byte)?;
        tokens.push(VisualToken {
            features: row,
            footprint: BBox::new(coords[0], coords[1], coords[2], coords[3]),
            is_padding: byte[0] != 0,
        });
    }
    Ok(VisualTokenSet { kind, feature_dim: dim, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{FrozenEncoders, VeConfig};
    use crate::scene::{generate_scene, render, AttributeSpace, SceneConfig};

    #[test]
    fn cache_roundtrip_is_exact() {
        let scene = generate_scene(4, &SceneConfig::default()).unwrap();
        let raster = render(&scene);
        let enc = FrozenEncoders::new(AttributeSpace::default(), VeConfig::default()).unwrap();
        for kind in VeKind::ALL {
            let set = enc.encode(kind, &raster, &scene).unwrap();
            let mut buf = Vec::new();
            write_token_cache(&mut buf, &set).unwrap();
            let back = read_token_cache(buf.as_slice()).unwrap();
            assert_eq!(set, back);
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let err = read_token_cache(&b"NOTACACH"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
