use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub format_version: u32,
    /// Arguments after the binary name, as given.
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) → sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes of every regular file in `dir` except the manifest itself.
pub fn hash_outputs(dir: &Path) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_FILE || !entry.file_type()?.is_file() {
            continue;
        }
        out.insert(name, sha256_file(&entry.path())?);
    }
    Ok(out)
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }

    pub fn read(path: &Path) -> io::Result<RunManifest> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}
