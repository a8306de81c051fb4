use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run.json";

/// Everything needed to replay one command invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

/// Collects manifest fields while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config: String::new(),
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                wall_clock_secs: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, text: impl Into<String>) {
        self.manifest.config = text.into();
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = dir.join(MANIFEST_FILE);
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
