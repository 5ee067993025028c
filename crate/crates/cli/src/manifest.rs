//! JSON run manifest written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use due_core::datasets::Provenance;

use crate::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Arguments that reproduce the run, after the program name.
    pub rerun: Vec<String>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub datasets: Vec<Provenance>,
    pub metrics: BTreeMap<String, f64>,
    /// Output name → file path.
    pub outputs: BTreeMap<String, PathBuf>,
    /// Phase name → wall-clock seconds.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, rerun: Vec<String>, config: serde_json::Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            rerun,
            config,
            ..Self::default()
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn output(&mut self, name: impl Into<String>, path: &Path) {
        self.outputs.insert(name.into(), path.to_path_buf());
    }

    pub fn time(&mut self, name: impl Into<String>, start: std::time::Instant) {
        self.timings.insert(name.into(), start.elapsed().as_secs_f64());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
