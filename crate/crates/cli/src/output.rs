//! Run directories, artifact bookkeeping and the command summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::{Command, OUT_ENV};

/// Where a command writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct Target {
    pub root: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

/// Machine-readable result written as `summary.json`.
#[derive(Serialize)]
struct CommandResult<'a> {
    command: &'a str,
    exit_code: i32,
    artifacts: &'a [PathBuf],
    summary: serde_json::Value,
}

pub struct Run {
    pub dir: PathBuf,
    command: &'static str,
    artifacts: Vec<PathBuf>,
}

impl Run {
    /// Creates the run directory and echoes `command` into `config.toml`.
    pub fn start(target: &Target, command: &Command) -> Result<Self> {
        let dir = match &target.run_dir {
            Some(d) => d.clone(),
            None => {
                let root = target
                    .root
                    .clone()
                    .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("runs"));
                stamped(&root, command.name())
            }
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run = Self { dir, command: command.name(), artifacts: Vec::new() };
        run.write("config.toml", toml::to_string(command).context("serializing the command config")?)?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(path.clone());
        Ok(path)
    }

    /// Records a file written by library code.
    pub fn record(&mut self, name: &str) -> PathBuf {
        let path = self.path(name);
        self.artifacts.push(path.clone());
        path
    }

    pub fn finish(mut self, summary: serde_json::Value) -> Result<PathBuf> {
        let path = self.path("summary.json");
        self.artifacts.push(path.clone());
        let result = CommandResult { command: self.command, exit_code: 0, artifacts: &self.artifacts, summary };
        fs::write(&path, serde_json::to_string_pretty(&result)?)?;
        Ok(self.dir)
    }
}

fn stamped(root: &Path, command: &str) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = format!("{command}-{secs}");
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    dir
}
