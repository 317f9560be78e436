//! Run manifests: what was run, on which inputs, and what it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use latent_adapter::checkpoint::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Arguments after the program name, exactly as given.
    pub command: Vec<String>,
    /// Directory that relative paths in `command` were resolved against.
    pub root: PathBuf,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    /// Content hash of every input file or directory, keyed by resolved path.
    pub inputs: BTreeMap<String, String>,
    pub out_dir: PathBuf,
    /// SHA-256 of every output file, keyed by path relative to `out_dir`.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_NAME), &serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Files under `dir` (or `dir` itself if it is a file), sorted, relative to `base`.
fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_file() {
        out.push(dir.strip_prefix(base).unwrap_or(dir).to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        walk(base, &p, out)?;
    }
    Ok(())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

/// SHA-256 of a file, or for a directory SHA-256 over its sorted
/// `relative-path NUL file-hash NL` lines.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return file_hash(path);
    }
    let mut files = Vec::new();
    walk(path, path, &mut files)?;
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(file_hash(&path.join(&rel))?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// Hashes every file under the registered output entries of `out_dir`.
pub fn hash_outputs(out_dir: &Path, entries: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    for e in entries {
        walk(out_dir, &out_dir.join(e), &mut files)?;
    }
    files
        .into_iter()
        .map(|rel| Ok((rel.to_string_lossy().into_owned(), file_hash(&out_dir.join(&rel))?)))
        .collect()
}
