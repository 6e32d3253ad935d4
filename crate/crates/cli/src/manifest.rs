use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Written next to every output so a run can be repeated with
/// `--params <manifest>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub params: Value,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Headline results of the run.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub summary: Value,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, params: Value, seed: u64, threads: usize) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            argv: std::env::args().collect(),
            params,
            seed,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: Value::Null,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: 0.0,
        }
    }

    pub fn write(&mut self, path: &Path, elapsed: Duration) -> Result<()> {
        self.duration_secs = elapsed.as_secs_f64();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// `dir/name.ext` → `dir/name.run.json`.
pub fn path_for(output: &Path) -> PathBuf {
    let stem = output.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    output.with_file_name(format!("{stem}.run.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(path_for(Path::new("out/best.json")), PathBuf::from("out/best.run.json"));
        assert_eq!(path_for(Path::new("grid.csv")), PathBuf::from("grid.run.json"));
    }
}
