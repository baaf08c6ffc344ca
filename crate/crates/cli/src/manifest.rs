//! Run manifests: the resolved settings plus content hashes of every input
//! and artifact, written next to the artifacts.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub precision: String,
    pub seed: u64,
    pub threads: usize,
    /// Settings as a `--config` file would hold them.
    pub config: toml::Table,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let mut f = std::fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

impl Manifest {
    /// Writes `manifest.json` and the equivalent `config.toml` into `out`.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let json = out.join("manifest.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")?;
        let cfg = out.join("config.toml");
        std::fs::write(&cfg, toml::to_string(&self.config)?)?;
        Ok(vec![json, cfg])
    }
}
