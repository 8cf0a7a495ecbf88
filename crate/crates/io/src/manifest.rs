//! The run manifest: what was produced, with checksums.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub ok: bool,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Host time spent on the block. Timing lives only here.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub artifact_version: String,
    /// SHA-256 of the canonical (re-serialized) configuration.
    pub config_sha256: String,
    pub master_seed: u64,
    pub created_unix_s: u64,
    pub blocks: Vec<BlockEntry>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn failures(&self) -> impl Iterator<Item = &BlockEntry> {
        self.blocks.iter().filter(|b| !b.ok)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &BlockEntry> {
        self.blocks.iter().filter(|b| b.ok)
    }

    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    /// Files whose checksum or size no longer matches, or that are missing.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for f in &self.files {
            match std::fs::read(dir.join(&f.path)) {
                Ok(b) if b.len() as u64 == f.bytes && sha256_hex(&b) == f.sha256 => {}
                Ok(_) => bad.push(format!("{}: checksum mismatch", f.path)),
                Err(e) => bad.push(format!("{}: {e}", f.path)),
            }
        }
        bad
    }
}
