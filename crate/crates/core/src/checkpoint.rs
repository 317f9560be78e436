//! Named-array checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"LACKPT01"                      8-byte magic
//! u64 (little endian)              header length in bytes
//! header                           UTF-8 JSON: {"metadata": {...}, "arrays": [{"name", "shape", "offset", "len"}]}
//! payload                          f32 little endian, arrays back to back
//! ```
//!
//! Array names follow the dotted path scheme of [`ParamStore`](crate::nn::ParamStore).
//! `offset` and `len` count `f32` elements from the start of the payload.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LACKPT01";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 4],
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value, arrays: BTreeMap<String, Tensor<f32>>) -> Self {
        Self { metadata, arrays }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, t) in &self.arrays {
            entries.push(ArrayEntry { name: name.clone(), shape: t.shape(), offset, len: t.len() as u64 });
            offset += t.len() as u64;
        }
        let header = serde_json::to_vec(&Header { metadata: self.metadata.clone(), arrays: entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        let payload = &bytes[hend..];
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let start = e.offset as usize * 4;
            let end = start + e.len as usize * 4;
            if end > payload.len() || e.shape.iter().product::<usize>() != e.len as usize {
                return Err(Error::Checkpoint(format!("array {} is out of bounds or misshapen", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(e.name, Tensor::from_vec(e.shape, data)?);
        }
        Ok(Self { metadata: header.metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 over array names, shapes and values (metadata excluded).
    pub fn content_hash(&self) -> String {
        hash_arrays(&self.arrays)
    }
}

pub fn hash_arrays(arrays: &BTreeMap<String, Tensor<f32>>) -> String {
    let mut h = Sha256::new();
    for (name, t) in arrays {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Names whose arrays differ (in value or shape) between two snapshots, plus
/// names present in only one of them.
pub fn diff_arrays(a: &BTreeMap<String, Tensor<f32>>, b: &BTreeMap<String, Tensor<f32>>) -> Vec<String> {
    let mut out = Vec::new();
    for (name, ta) in a {
        match b.get(name) {
            Some(tb) if tb.shape() == ta.shape() && tb.data().iter().zip(ta.data()).all(|(x, y)| x.to_bits() == y.to_bits()) => {}
            _ => out.push(name.clone()),
        }
    }
    out.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    out
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut arrays = BTreeMap::new();
        arrays.insert("enc.scale1.conv.weight".to_string(), Tensor::from_vec([2, 1, 1, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        arrays.insert("enc.scale1.conv.bias".to_string(), Tensor::from_vec([2, 1, 1, 1], vec![0.25, f32::MIN_POSITIVE]).unwrap());
        Checkpoint::new(serde_json::json!({"step": 3}), arrays)
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
    }

    #[test]
    fn file_roundtrip_and_diff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(diff_arrays(&c.arrays, &back.arrays).is_empty());
        let mut changed = back.arrays.clone();
        changed.get_mut("enc.scale1.conv.bias").unwrap().data_mut()[0] = 0.5;
        assert_eq!(diff_arrays(&c.arrays, &changed), vec!["enc.scale1.conv.bias".to_string()]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
