//! Flat key-value config files. Keys are long flag names (`batch-size` or
//! `batch_size`); a value given on the command line always wins over the
//! file, and the file wins over built-in defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, Value>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize(key: &str) -> String {
    key.replace('_', "-")
}

fn scalar_text(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Array(items) => Ok(items.iter().map(|i| scalar_text(key, i)).collect::<Result<Vec<_>>>()?.join(",")),
        _ => bail!("config key '{key}' must be a string, number, boolean or list"),
    }
}

impl FileConfig {
    /// Reads a `.toml` file or, for any other extension, a JSON object.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = if path.extension().is_some_and(|e| e == "toml") {
            let t: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            serde_json::to_value(t)?
        } else {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        let Value::Object(map) = value else { bail!("config {} must hold a key-value table", path.display()) };
        Ok(Self { values: map.into_iter().map(|(k, v)| (normalize(&k), v)).collect(), used: RefCell::default() })
    }

    pub fn from_pairs(pairs: &[(&str, Value)]) -> Self {
        Self { values: pairs.iter().map(|(k, v)| (normalize(k), v.clone())).collect(), used: RefCell::default() }
    }

    fn raw(&self, key: &str) -> Result<Option<String>> {
        let key = normalize(key);
        self.used.borrow_mut().insert(key.clone());
        self.values.get(&key).map(|v| scalar_text(&key, v)).transpose()
    }

    pub fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let from_file = self.raw(key)?;
        if flag.is_some() {
            return Ok(flag);
        }
        from_file.map(|s| s.parse().map_err(|e| anyhow!("config key '{key}': {e}"))).transpose()
    }

    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    /// Repeated or comma-separated values; a non-empty flag list replaces the
    /// file's list entirely.
    pub fn list<T: FromStr>(&self, flag: Vec<T>, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let from_file = self.raw(key)?;
        if !flag.is_empty() {
            return Ok(flag);
        }
        match from_file {
            None => Ok(Vec::new()),
            Some(s) if s.trim().is_empty() => Ok(Vec::new()),
            Some(s) => s.split(',').map(|p| p.trim().parse().map_err(|e| anyhow!("config key '{key}': {e}"))).collect(),
        }
    }

    /// Keys in the file that the command never asked for.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.values.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let cfg = FileConfig::from_pairs(&[("batch_size", Value::from(4)), ("lr", Value::from("0.5"))]);
        assert_eq!(cfg.pick(Some(2usize), "batch-size", 8).unwrap(), 2);
        assert_eq!(cfg.pick(None, "batch-size", 8usize).unwrap(), 4);
        assert_eq!(cfg.pick(None, "lr", 1.0f32).unwrap(), 0.5);
        assert_eq!(cfg.pick(None, "steps", 7usize).unwrap(), 7);
        assert!(cfg.unused().is_empty());
    }

    #[test]
    fn lists_and_bad_values() {
        let cfg = FileConfig::from_pairs(&[("weights", serde_json::json!([0.5, 1])), ("steps", Value::from("many"))]);
        assert_eq!(cfg.list::<f32>(vec![], "weights").unwrap(), vec![0.5, 1.0]);
        assert_eq!(cfg.list(vec![2.0f32], "weights").unwrap(), vec![2.0]);
        assert!(cfg.pick(None, "steps", 1usize).is_err());
    }

    #[test]
    fn toml_and_json_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 3\nsampling = \"uniform\"\n").unwrap();
        let cfg = FileConfig::load(&t).unwrap();
        assert_eq!(cfg.pick(None, "seed", 0u64).unwrap(), 3);
        assert_eq!(cfg.unused(), vec!["sampling".to_string()]);
        let j = dir.path().join("c.json");
        std::fs::write(&j, "[1, 2]").unwrap();
        assert!(FileConfig::load(&j).is_err());
    }
}
