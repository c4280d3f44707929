//! Run manifests: the resolved job plus digests of everything read and written.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Job;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub job: Job,
    /// Input files with absolute paths.
    pub inputs: Vec<FileDigest>,
    /// Artifacts relative to the output directory, sorted.
    pub artifacts: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(CliError::io(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(CliError::io(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn digest(path: &Path, recorded_as: PathBuf) -> Result<FileDigest> {
    Ok(FileDigest {
        sha256: sha256_file(path)?,
        path: recorded_as,
    })
}

impl RunManifest {
    pub fn new(job: Job, inputs: Vec<FileDigest>, out_dir: &Path, artifacts: &[PathBuf]) -> Result<Self> {
        let mut digests = artifacts
            .iter()
            .map(|rel| digest(&out_dir.join(rel), rel.clone()))
            .collect::<Result<Vec<_>>>()?;
        digests.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self {
            tool: "crossdenoise".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            job,
            inputs,
            artifacts: digests,
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
