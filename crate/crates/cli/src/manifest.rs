//! Run manifests: every subcommand records its arguments, resolved
//! configuration, inputs and output artifacts with content hashes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const OUT_DIR_ENV: &str = "TABPO_OUT_DIR";

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub out_dir: String,
    pub out_dir_env: Option<String>,
    pub parallel_available: bool,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub inputs: Vec<FileRecord>,
    pub artifacts: Vec<FileRecord>,
    pub wall_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn record(path: &Path, base: &Path) -> Result<FileRecord> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let shown = path.strip_prefix(base).unwrap_or(path);
    Ok(FileRecord {
        path: shown.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

pub struct Run {
    pub subcommand: &'static str,
    pub dir: PathBuf,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    start: Instant,
}

impl Run {
    pub fn new(subcommand: &'static str, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run {
            subcommand,
            dir,
            seed: None,
            config: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Path inside the run directory.
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes an artifact atomically and records it.
    pub fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(path);
        Ok(())
    }

    pub fn write_named(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.write(self.path(name), bytes)
    }

    pub fn finish(self, argv: Vec<String>) -> Result<PathBuf> {
        let inputs = self.inputs.iter().map(|p| record(p, &self.dir)).collect::<Result<Vec<_>>>()?;
        let artifacts = self.artifacts.iter().map(|p| record(p, &self.dir)).collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            tool: "tabpo",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand.to_string(),
            argv,
            out_dir: self.dir.display().to_string(),
            out_dir_env: std::env::var(OUT_DIR_ENV).ok(),
            parallel_available: tabpo_core::parallel::is_parallel_available(),
            seed: self.seed,
            config: self.config,
            inputs,
            artifacts,
            wall_seconds: self.start.elapsed().as_secs_f64(),
        };
        let path = self.dir.join(format!("{}.manifest.json", self.subcommand));
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
