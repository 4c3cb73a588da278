//! Artifact writing with provenance sidecars and overwrite protection.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("stage {stage}: missing input {}", path.display())]
    MissingInput { stage: String, path: PathBuf },
    #[error("refusing to overwrite {} with different content (pass --force)", .0.display())]
    Overwrite(PathBuf),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    sha256: &'a str,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes artifacts next to a `.meta.json` sidecar holding the config
/// hash, seed and content hash. Rewriting identical bytes is allowed;
/// changing an existing file needs `force`.
#[derive(Debug, Clone)]
pub struct Writer {
    pub provenance: Provenance,
    pub force: bool,
}

impl Writer {
    pub fn bytes(&self, path: &Path, bytes: &[u8]) -> Result<String> {
        if path.exists() && !self.force && fs::read(path)? != bytes {
            return Err(CliError::Overwrite(path.to_path_buf()).into());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let sha = sha256_hex(bytes);
        let meta = Sidecar { provenance: &self.provenance, sha256: &sha };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(sha)
    }

    pub fn json<T: Serialize + ?Sized>(&self, path: &Path, value: &T) -> Result<String> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.bytes(path, &text)
    }

    pub fn epochs(&self, path: &Path, epochs: &cvep_core::containers::EpochSet) -> Result<String> {
        self.bytes(path, &cvep_core::containers::encode_epochs(epochs)?)
    }
}
