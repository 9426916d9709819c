use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
/// Wall-clock measurements, the one output that differs between identical
/// runs.
pub const TIMING: &str = "timing.json";

/// Output directory that records the digest of every file written to it.
pub struct OutDir {
    root: PathBuf,
    digests: BTreeMap<String, String>,
    unlisted: Vec<String>,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    path: &'a str,
    sha256: &'a str,
    bytes: usize,
}

impl OutDir {
    pub fn create(root: PathBuf) -> CliResult<Self> {
        std::fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        Ok(Self {
            root,
            digests: BTreeMap::new(),
            unlisted: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        let digest = format!("{:x}", Sha256::digest(bytes));
        self.digests.insert(name.to_string(), format!("{digest}:{}", bytes.len()));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("outputs always serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes a file whose content varies between identical runs. The
    /// manifest names it under `volatile`, without a digest.
    pub fn write_volatile(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.unlisted.push(name.to_string());
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        let entries: Vec<ManifestEntry> = self
            .digests
            .iter()
            .map(|(path, v)| {
                let (sha256, bytes) = v.split_once(':').unwrap();
                ManifestEntry {
                    path,
                    sha256,
                    bytes: bytes.parse().unwrap(),
                }
            })
            .collect();
        let mut text = serde_json::to_string_pretty(&serde_json::json!({ "files": entries, "volatile": self.unlisted }))
            .expect("manifest serializes");
        text.push('\n');
        let path = self.root.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.digests.clear();
        Ok(())
    }
}
