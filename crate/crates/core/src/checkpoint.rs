//! Binary checkpoints of a model's configuration and parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ATLASCKP" | version u32 | config length u64 | config text (key=value lines)
//! tensor count u64 | per tensor: name length u32, name, rank u32, extents u64 x rank, values f64 x product
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AtlasConfig, AtlasModel, AtlasParams};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"ATLASCKP";
pub const VERSION: u32 = 1;

pub fn encode(model: &AtlasModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model.config.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let mut count = 0u64;
    model.params.visit("", &mut |_, _, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    model.params.visit("", &mut |name, extents, values| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(extents.len() as u32).to_le_bytes());
        for &e in extents {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in memory")))
    }
}

struct RawTensor {
    name: String,
    extents: Vec<usize>,
    values: Vec<f64>,
}

/// Parse a checkpoint. Nothing is returned unless the whole buffer is valid.
pub fn decode(bytes: &[u8]) -> Result<AtlasModel> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not an atlas checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let n = r.len("config length")?;
    let text = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = AtlasConfig::parse(text)?;

    let count = r.len("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        let extents = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<_>>>()?;
        let total = extents
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|t| t.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' is too large")))?;
        let values = r
            .take(total, &format!("tensor '{name}'"))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(RawTensor { name, extents, values });
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", bytes.len() - r.at)));
    }

    let mut params = AtlasParams::new(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut expected = 0usize;
    params.visit("", &mut |_, _, _| expected += 1);
    if expected != tensors.len() {
        return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, its config needs {expected}", tensors.len())));
    }
    let mut idx = 0;
    let mut mismatch = None;
    params.visit_mut("", &mut |name, extents, values| {
        let t = &tensors[idx];
        idx += 1;
        if mismatch.is_some() {
            return;
        }
        if t.name != name || t.extents != extents {
            mismatch = Some(format!(
                "tensor {} is '{}' {:?}, expected '{name}' {extents:?}",
                idx - 1,
                t.name,
                t.extents
            ));
            return;
        }
        values.copy_from_slice(&t.values);
    });
    if let Some(m) = mismatch {
        return Err(Error::Checkpoint(m));
    }
    AtlasModel::from_params(config, params)
}

pub fn save_checkpoint(model: &AtlasModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<AtlasModel> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Load and require the stored configuration to equal `expected`; the error
/// names the first differing key.
pub fn load_checkpoint_for(path: &Path, expected: &AtlasConfig) -> Result<AtlasModel> {
    let model = load_checkpoint(path)?;
    if let Some(key) = expected.first_difference(&model.config) {
        return Err(Error::Checkpoint(format!(
            "config mismatch in '{key}': checkpoint has {}, expected {}",
            model.config.get(key).unwrap_or_default(),
            expected.get(key).unwrap_or_default()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::OpCounter;
    use crate::tensor::TensorMap;

    fn small() -> AtlasModel {
        let cfg = AtlasConfig {
            image_side: 16,
            patch: 2,
            in_channels: 1,
            window: 4,
            channels: 8,
            heads: 2,
            depths: vec![1, 1],
            classes: 2,
            seed: 3,
            ..AtlasConfig::default()
        };
        AtlasModel::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = TensorMap::random_normal([2, 16, 16, 1], 1.0, &mut rng);
        let a = m.forward(&x, true, &mut OpCounter::new()).unwrap();
        let b = back.forward(&x, true, &mut OpCounter::new()).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&small());
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&small());
        bytes[8] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version 9"));
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn shape_mismatch_is_named() {
        let m = small();
        let mut bytes = encode(&m);
        // Rewrite the stored config to a wider model; tensor shapes no longer fit.
        let text = m.config.to_text();
        let wider = text.replace("channels=8", "channels=4");
        assert_eq!(wider.len(), text.len());
        let start = 8 + 4 + 8;
        bytes[start..start + text.len()].copy_from_slice(wider.as_bytes());
        let e = decode(&bytes).unwrap_err().to_string();
        assert!(e.contains("patch_embed"), "{e}");
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let dir = std::env::temp_dir().join(format!("atlas-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let m = small();
        save_checkpoint(&m, &path).unwrap();
        let mut other = m.config.clone();
        other.depths = vec![1];
        let e = load_checkpoint_for(&path, &other).unwrap_err().to_string();
        assert!(e.contains("depths"), "{e}");
        assert!(load_checkpoint_for(&path, &m.config).is_ok());
        fs::remove_dir_all(&dir).unwrap();
    }
}
