use std::path::Path;

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use laf_core::LafConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

/// Written next to every output set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Option<LafConfig>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// First date of the fitted data when its time column held dates.
    pub date_origin: Option<String>,
    pub started: String,
    pub finished: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: format!("laf {}", env!("CARGO_PKG_VERSION")),
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            date_origin: None,
            started: now(),
            finished: String::new(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.finished = now();
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
