//! `manifest.json`: one entry per subcommand run in an output directory.

use std::collections::BTreeMap;
use std::path::Path;

use ade_core::io::{sha256_file, sha256_hex, write_atomic};
use ade_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// sha256 of the effective configuration rendered as JSON.
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// Input path to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path to sha256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        let config = serde_json::to_value(cfg).expect("config serializes");
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(config.to_string().as_bytes()),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, p: &Path) -> anyhow::Result<()> {
        self.inputs.insert(p.display().to_string(), sha256_file(p)?);
        Ok(())
    }

    pub fn output(&mut self, p: &Path) -> anyhow::Result<()> {
        self.outputs.insert(p.display().to_string(), sha256_file(p)?);
        Ok(())
    }

    /// Merges this run into the directory's manifest, replacing any earlier
    /// entry for the same subcommand.
    pub fn write(&self, out: &Path) -> anyhow::Result<()> {
        let path = out.join(MANIFEST_FILE);
        let mut all: BTreeMap<String, Manifest> = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        all.insert(self.command.clone(), self.clone());
        let mut text = serde_json::to_string_pretty(&all)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(())
    }
}
