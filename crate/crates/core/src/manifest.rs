//! Run manifests: one `manifest.json` per output directory, holding every run
//! that wrote there. Runs are only ever appended.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 of the checkpoint the run produced or consumed.
    pub checkpoint_sha256: Option<String>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub version: u32,
    pub runs: Vec<RunManifest>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<ManifestFile> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(ManifestFile { version: 1, runs: Vec::new() });
    }
    let file: ManifestFile = serde_json::from_slice(&fs::read(&path)?)?;
    if file.version != 1 {
        return Err(Error::Format(format!("unsupported manifest version {}", file.version)));
    }
    Ok(file)
}

/// Adds `run` to the directory's manifest, creating it if needed.
pub fn append_manifest(dir: impl AsRef<Path>, run: RunManifest) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut file = read_manifest(dir)?;
    file.runs.push(run);
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&file)?)?;
    fs::rename(tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}
