use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::config::Resolved;
use crate::CliError;

/// Record of one run, written as `<out>/<command>.manifest.json`.
pub struct Manifest {
    command: &'static str,
    started: Instant,
    seed: Option<u64>,
    artifacts: Map<String, Value>,
    results: Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Self { command, started: Instant::now(), seed: None, artifacts: Map::new(), results: Map::new() }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.into(), Value::String(path.display().to_string()));
    }

    pub fn result(&mut self, name: &str, value: Value) {
        self.results.insert(name.into(), value);
    }

    pub fn path(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("{command}.manifest.json"))
    }

    pub fn write(self, out_dir: &Path, config: &Resolved) -> Result<PathBuf, CliError> {
        let path = Self::path(out_dir, self.command);
        let doc = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config": config.to_json(),
            "artifacts": self.artifacts,
            "results": self.results,
            "wall_seconds": self.started.elapsed().as_secs_f64(),
        });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
