//! Run manifests: everything needed to replay a command.

use crate::data::file_sha256;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// SHA-256 of each input file, keyed by the path as given.
    pub input_hashes: BTreeMap<String, String>,
    pub tool_version: String,
    pub seed: Option<u64>,
}

impl RunManifest {
    pub fn new<C: Serialize>(subcommand: &str, config: &C, seed: Option<u64>) -> Result<Self> {
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config)?,
            input_hashes: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
        })
    }

    /// Hashes each input file and records it under its display path.
    pub fn with_inputs(mut self, inputs: &[&Path]) -> Result<Self> {
        for p in inputs {
            self.input_hashes.insert(p.display().to_string(), file_sha256(p)?);
        }
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}
