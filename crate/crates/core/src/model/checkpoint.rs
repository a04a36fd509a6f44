//! Checkpoint container. All integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MVMKCKPT"
//! 8       4     u32 format version
//! 12      4     u32 spec length S
//! 16      S     model spec as UTF-8 JSON
//! ..      8     u64 epoch
//! ..      4     u32 rng-state length R
//! ..      R     rng-state bytes
//! ..      8     u64 parameter count P
//! ..      4P    parameters, f32
//! ..      32    SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelCheckpoint, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVMKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn encode(model: &ModelCheckpoint) -> Vec<u8> {
    let spec = serde_json::to_vec(&model.spec).expect("spec serializes");
    let mut buf = Vec::with_capacity(64 + spec.len() + model.rng_state.len() + model.parameters.len() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    buf.extend_from_slice(&model.epoch.to_le_bytes());
    buf.extend_from_slice(&(model.rng_state.len() as u32).to_le_bytes());
    buf.extend_from_slice(&model.rng_state);
    buf.extend_from_slice(&(model.parameters.len() as u64).to_le_bytes());
    for p in &model.parameters {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<ModelCheckpoint> {
    let corrupt = |what: &str| Error::persistence(path, format!("corrupt checkpoint: {what}"));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(corrupt("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let spec_len = r.u32().ok_or_else(|| corrupt("truncated spec length"))? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len).ok_or_else(|| corrupt("truncated spec"))?)
        .map_err(|e| corrupt(&format!("spec: {e}")))?;
    spec.validate().map_err(|e| corrupt(&e.to_string()))?;
    let epoch = r.u64().ok_or_else(|| corrupt("truncated epoch"))?;
    let rng_len = r.u32().ok_or_else(|| corrupt("truncated rng state"))? as usize;
    let rng_state = r.take(rng_len).ok_or_else(|| corrupt("truncated rng state"))?.to_vec();
    let count = r.u64().ok_or_else(|| corrupt("truncated parameter count"))? as usize;
    if count != spec.parameter_count() {
        return Err(corrupt(&format!(
            "spec requires {} parameters, file holds {count}",
            spec.parameter_count()
        )));
    }
    let raw = r
        .take(count.checked_mul(4).ok_or_else(|| corrupt("parameter count overflow"))?)
        .ok_or_else(|| corrupt("truncated parameters"))?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    let parameters = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ModelCheckpoint {
        spec,
        parameters,
        epoch,
        rng_state,
    })
}

pub fn save_checkpoint(model: &ModelCheckpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(model)).map_err(|e| Error::persistence(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::persistence(path, e.to_string()))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        let spec = ModelSpec::mlp(3, 4, [5, 2]).unwrap();
        let mut m = ModelCheckpoint::initialize(&spec, 8).unwrap();
        m.epoch = 12;
        m.rng_state = vec![1, 2, 3];
        m
    }

    #[test]
    fn round_trip_preserves_logits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = sample();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        let probe = [0.3f32, -2.0, 1.0, 0.5, 4.0, 0.0, 0.0, -1.0];
        assert_eq!(back.forward_logits(&probe).unwrap(), m.forward_logits(&probe).unwrap());
        assert_eq!(back.parameters.len(), m.spec.parameter_count());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bytes = encode(&sample());
        for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::Persistence { .. })), "cut {cut}");
        }
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let mut bytes = encode(&sample());
        let mid = bytes.len() - 40;
        bytes[mid] ^= 0x40;
        assert!(decode(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn version_mismatch_reports_versions() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        match decode(&bytes, Path::new("x")) {
            Err(Error::Version { found: 7, expected: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
