//! Run manifest: everything needed to reproduce a command's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    /// Effective configuration after defaults, config file and flags.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Command-specific results worth keeping next to the outputs.
    pub summary: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &'static str, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    /// Records every entry of rendered `key=value` text.
    pub fn config_text(&mut self, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn summary(&mut self, key: &str, value: impl ToString) {
        self.summary.insert(key.to_string(), value.to_string());
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST_FILE), json + "\n")
    }
}
