//! Reproducibility record written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fsio;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub command: String,
    /// Hash of the compact JSON config, absent for commands without one.
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    /// Command-line arguments that shaped the outputs, excluding paths.
    pub arguments: BTreeMap<String, String>,
    /// SHA-256 of each input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            core_version: cryoslice_core::VERSION.to_owned(),
            command: command.to_owned(),
            config_sha256: None,
            seed: None,
            arguments: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn argument(&mut self, key: &str, value: impl ToString) {
        self.arguments.insert(key.to_owned(), value.to_string());
    }

    pub fn input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(role.to_owned(), file_sha256(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.insert(name, file_sha256(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        fsio::write_atomic(path, s.as_bytes())
    }
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(format!("{:x}", Sha256::digest(std::fs::read(path)?)))
}
