//! Exit-code classification, input hashing and the per-run manifest.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum Failure {
    /// A metric had no defined value (exit 1).
    MetricUndefined(String),
    /// Unreadable or invalid input (exit 2).
    Input(String),
    /// Anything else (exit 3).
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::MetricUndefined(_) => 1,
            Failure::Input(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::MetricUndefined(m) | Failure::Input(m) | Failure::Internal(m) => m,
        }
    }
}

pub type CmdResult<T> = Result<T, Failure>;

pub trait Classify<T> {
    fn input(self, what: &str) -> CmdResult<T>;
    fn internal(self, what: &str) -> CmdResult<T>;
    fn metric(self, what: &str) -> CmdResult<T>;
}

impl<T, E: Display> Classify<T> for Result<T, E> {
    fn input(self, what: &str) -> CmdResult<T> {
        self.map_err(|e| Failure::Input(format!("{what}: {e}")))
    }
    fn internal(self, what: &str) -> CmdResult<T> {
        self.map_err(|e| Failure::Internal(format!("{what}: {e}")))
    }
    fn metric(self, what: &str) -> CmdResult<T> {
        self.map_err(|e| Failure::MetricUndefined(format!("{what}: {e}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub status: String,
    pub exit_code: u8,
    pub wall_time_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-command state: output directory, recorded inputs/outputs and the
/// config snapshot that goes into `manifest.json`.
pub struct RunContext {
    pub out: PathBuf,
    pub seed: u64,
    pub config_override: Option<Value>,
    command: String,
    config: Value,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    started: Instant,
}

impl RunContext {
    pub fn new(command: &str, out: PathBuf, seed: u64, config_override: Option<Value>) -> Self {
        Self {
            out,
            seed,
            config_override,
            command: command.to_string(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn read_input(&mut self, path: &Path) -> CmdResult<String> {
        let bytes = fs::read(path).input(&format!("reading {}", path.display()))?;
        self.inputs.push(InputHash { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        String::from_utf8(bytes).input(&format!("{} is not UTF-8", path.display()))
    }

    /// Records a non-file input (built-in fixture) by the hash of its content.
    pub fn record_input(&mut self, label: &str, content: &[u8]) {
        self.inputs.push(InputHash { path: label.to_string(), sha256: sha256_hex(content) });
    }

    /// Hashes every regular file directly under `dir`, in name order.
    pub fn record_dir(&mut self, dir: &Path) -> CmdResult<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .input(&format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in &files {
            let bytes = fs::read(f).input(&format!("reading {}", f.display()))?;
            self.inputs.push(InputHash { path: f.display().to_string(), sha256: sha256_hex(&bytes) });
        }
        Ok(files)
    }

    pub fn set_config(&mut self, config: impl Serialize) {
        self.config = serde_json::to_value(config).unwrap_or(Value::Null);
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> CmdResult<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).input(&format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).input(&format!("writing {}", path.display()))?;
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> CmdResult<PathBuf> {
        let bytes = serde_json::to_vec_pretty(value).internal("serializing output")?;
        self.write(rel, bytes)
    }

    pub fn write_csv(&mut self, rel: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CmdResult<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).internal("writing csv")?;
        for r in rows {
            w.write_record(&r).internal("writing csv")?;
        }
        let bytes = w.into_inner().internal("writing csv")?;
        self.write(rel, bytes)
    }

    /// Records an output directory written by other code.
    pub fn note_output(&mut self, rel: &str) {
        self.outputs.push(rel.to_string());
    }

    pub fn finish(self, result: &CmdResult<()>) -> std::io::Result<()> {
        let (status, exit_code) = match result {
            Ok(()) => ("ok".to_string(), 0),
            Err(f) => (format!("error: {}", f.message()), f.exit_code()),
        };
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            status,
            exit_code,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other)?)
    }
}
