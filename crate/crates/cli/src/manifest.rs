use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

use crate::exit::CliResult;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Provenance record written once by every command that produces artifacts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub dataset_hash: Option<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub started: String,
    pub finished: String,
    pub metrics: Value,
    pub artifacts: Vec<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: Value, threads: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            dataset_hash: None,
            seed: None,
            threads,
            started: now(),
            finished: String::new(),
            metrics: Value::Null,
            artifacts: Vec::new(),
        }
    }

    pub fn artifact(&mut self, p: &Path) {
        self.artifacts.push(p.display().to_string());
    }

    /// Stamps the finish time and writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> CliResult<()> {
        self.finished = now();
        fs::write(path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}

/// Location of the manifest for a command whose output is a single file.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    out.with_file_name(name)
}
