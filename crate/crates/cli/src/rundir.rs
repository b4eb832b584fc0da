//! Output directories: config snapshot, manifest and overwrite protection.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use adakd_core::config::DistillRunConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Common};

pub const RUNS_DIR_ENV: &str = "ADAKD_RUNS_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub args: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: String,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn resolve_out(common: &Common, command: &str) -> PathBuf {
    match &common.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(command)
        }
    }
}

/// Loads the config with overrides, `extra` applied last.
pub fn load_config(common: &Common, extra: &[String]) -> CliResult<DistillRunConfig> {
    let mut overrides = common.set.clone();
    overrides.extend_from_slice(extra);
    Ok(DistillRunConfig::load(common.config.as_deref(), &overrides)?)
}

impl RunDir {
    /// Creates the directory, refuses to clobber a completed run unless
    /// `force`, and writes the config snapshot and a running manifest.
    pub fn start(path: PathBuf, command: &str, cfg: &DistillRunConfig, seeds: Vec<u64>, force: bool) -> CliResult<Self> {
        let manifest_path = path.join("manifest.json");
        if let Ok(text) = fs::read_to_string(&manifest_path) {
            let done = serde_json::from_str::<Manifest>(&text).is_ok_and(|m| m.status == "completed");
            if done && !force {
                return Err(CliError::Usage(format!(
                    "{} holds a completed run; pass --force to overwrite",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(&path)?;
        fs::write(path.join("config.toml"), cfg.snapshot()?)?;
        let manifest = Manifest {
            command: command.to_string(),
            seeds,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            args: std::env::args().skip(1).collect(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
        };
        let dir = Self { path, manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    fn write_manifest(&self) -> CliResult<()> {
        fs::write(self.path.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Records the outcome of the work started by [`RunDir::start`].
    pub fn finish<T>(mut self, result: CliResult<T>) -> CliResult<T> {
        self.manifest.finished_unix = Some(now());
        self.manifest.status = if result.is_ok() { "completed" } else { "failed" }.into();
        self.write_manifest()?;
        result
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }
}

/// Writes a small CSV from preformatted cells.
pub fn write_summary(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
