//! `manifest.json`: what was run, with which config and seed, and the
//! SHA-256 of every file it wrote.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub struct Manifest {
    command: String,
    seed: u64,
    config: Value,
    artifacts: Vec<PathBuf>,
    extra: Map<String, Value>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            command: command.into(),
            seed,
            config,
            artifacts: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn artifact(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.extra.insert(key.into(), value);
    }

    /// Hashes the artifacts and writes `out_dir/manifest.json`. Paths are
    /// recorded relative to `out_dir` where possible.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let mut artifacts = Map::new();
        for p in &self.artifacts {
            let key = p.strip_prefix(out_dir).unwrap_or(p).display().to_string();
            artifacts.insert(key, Value::String(sha256_file(p)?));
        }
        let m = json!({
            "tool": "fewview",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "seed": self.seed,
            "config": self.config,
            "artifacts": artifacts,
            "results": self.extra,
        });
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_match_known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("abc.txt");
        std::fs::write(&f, "abc").unwrap();
        assert_eq!(
            sha256_file(&f).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let mut m = Manifest::new("t", 9, json!({"a": 1}));
        m.artifact(f);
        let v: Value = serde_json::from_str(&std::fs::read_to_string(m.write(dir.path()).unwrap()).unwrap()).unwrap();
        assert_eq!(v["artifacts"]["abc.txt"].as_str().unwrap().len(), 64);
        assert_eq!(v["seed"], 9);
    }
}
