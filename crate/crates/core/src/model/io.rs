//! Model file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IFVP"                     4 bytes magic
//! format version             u32
//! header length              u32
//! header                     UTF-8 JSON: config + ordered weight manifest
//! payload                    raw f32 weights in manifest order
//! CRC32 of the payload       u32
//! ```
//!
//! Round-trips are bit-exact; corruption, truncation and unknown versions are
//! reported as distinct errors without returning a partial model.

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_MAGIC: [u8; 4] = *b"IFVP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    let manifest: Vec<ManifestEntry> = model
        .weights()
        .iter()
        .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let header = serde_json::to_vec(&Header { config: model.config().clone(), manifest })?;

    let mut payload = Vec::new();
    for t in model.weights().values() {
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut file = fs::File::create(path)?;
    file.write_all(&FORMAT_MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    file.write_all(&payload)?;
    file.write_all(&crc.to_le_bytes())?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Truncated(format!("{what}: wanted {n} bytes, {} left", bytes.len())));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut bytes = raw.as_slice();

    if take(&mut bytes, 4, "magic")? != FORMAT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(&mut bytes, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = read_u32(&mut bytes, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len, "header")?)?;

    let payload_len: usize =
        header.manifest.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    let payload = take(&mut bytes, payload_len, "weight payload")?;
    let stored = read_u32(&mut bytes, "checksum")?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut weights = BTreeMap::new();
    let mut offset = 0usize;
    for entry in &header.manifest {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f32> = payload[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += n * 4;
        weights.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Model::from_parts(header.config, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::model::tests::tiny_config;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ifvp");
        let model = init_model::<f32>(&tiny_config(), 5).unwrap();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config(), model.config());
        for (k, v) in model.weights() {
            assert_eq!(v.data(), back.weights()[k].data(), "{k}");
        }
        // saving the loaded model reproduces the file byte for byte
        let path2 = dir.path().join("m2.ifvp");
        save_model(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_payload_byte_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ifvp");
        let model = init_model::<f32>(&tiny_config(), 6).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 20; // inside the payload, ahead of the CRC
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ifvp");
        let model = init_model::<f32>(&tiny_config(), 7).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::UnsupportedVersion(99))));
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ifvp");
        let model = init_model::<f32>(&tiny_config(), 8).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(load_model(&path), Err(Error::BadMagic)));

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Truncated(_))));
    }
}
