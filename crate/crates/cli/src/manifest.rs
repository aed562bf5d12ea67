use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

/// Written next to every artifact as `<artifact>.manifest.json`.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// The invocation as typed, program name excluded.
    pub argv: Vec<String>,
    /// Every parameter after defaults were applied.
    pub params: Value,
    pub seed: Option<u64>,
    pub git_describe: &'static str,
    pub version: &'static str,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outputs: Vec<PathBuf>,
    /// Command-specific results worth keeping with the artifact.
    pub summary: Value,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, params: &impl Serialize, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().skip(1).collect(),
            params: serde_json::to_value(params).expect("parameters serialize"),
            seed,
            git_describe: env!("GMS_GIT_DESCRIBE"),
            version: env!("CARGO_PKG_VERSION"),
            started_at: now(),
            finished_at: None,
            outputs: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// The full command line that reproduces this run.
    pub fn command_line(&self) -> String {
        std::iter::once("gms".to_string())
            .chain(self.argv.iter().cloned())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn finish(mut self, artifact: &Path) -> anyhow::Result<PathBuf> {
        self.finished_at = Some(now());
        let path = manifest_path(artifact);
        let mut json = serde_json::to_value(&self)?;
        json["command_line"] = Value::String(self.command_line());
        std::fs::write(&path, serde_json::to_vec_pretty(&json)?)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(path)
    }
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
