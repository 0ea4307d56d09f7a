//! Run manifests: config hash, seeds, crate version and the SHA-256 of every
//! declared output, written beside the outputs themselves.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: BTreeMap<String, String>,
}

pub struct ManifestBuilder {
    out_dir: PathBuf,
    manifest: Manifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ManifestBuilder {
    pub fn new(command: &str, out_dir: &Path, config: &fsrw_core::config::ExperimentConfig) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("data".into(), config.data.seed);
        seeds.insert("model".into(), config.model.seed);
        seeds.insert("train".into(), config.train.seed);
        seeds.insert("split".into(), config.split.seed);
        seeds.insert("shots".into(), config.shots.seed);
        ManifestBuilder {
            out_dir: out_dir.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config_sha256: sha256_hex(crate::config_io::canonical_json(config).as_bytes()),
                seeds,
                outputs: BTreeMap::new(),
            },
        }
    }

    /// Write one output file and record its hash.
    pub fn write_output(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Record a file that was written through another path.
    pub fn record_file(&mut self, rel: &str) -> Result<()> {
        let path = self.out_dir.join(rel);
        let bytes = std::fs::read(&path).with_context(|| format!("hashing {}", path.display()))?;
        self.manifest.outputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Validate every declared output exists, then write manifest.json.
    pub fn finish(self) -> Result<()> {
        for rel in self.manifest.outputs.keys() {
            let p = self.out_dir.join(rel);
            anyhow::ensure!(p.is_file(), "declared output missing: {}", p.display());
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.out_dir.join("manifest.json"), json)?;
        Ok(())
    }
}
