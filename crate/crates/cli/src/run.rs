//! Output directories and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Local};
use serde::Serialize;
use ssmlab_core::{Error, Result};

use crate::config::ExperimentConfig;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "SSMLAB_OUT";
pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub command: String,
    pub seed: u64,
    outputs: Vec<String>,
    started: Instant,
    started_at: DateTime<Local>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    started: String,
    wall_time_s: f64,
    status: &'a str,
    exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    outputs: &'a [String],
    args: &'a BTreeMap<String, String>,
    /// Absent when the configuration itself failed to load.
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a ExperimentConfig>,
}

impl RunDir {
    /// `explicit` wins; otherwise `<root>/<command>_<timestamp>_<seed>/` where
    /// `root` is `out_root`, then `$SSMLAB_OUT`, then `runs`.
    pub fn create(command: &str, seed: u64, explicit: Option<&Path>, out_root: Option<&Path>) -> Result<Self> {
        let started_at = Local::now();
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let root = out_root
                    .map(Path::to_path_buf)
                    .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("runs"));
                let stem = format!("{command}_{}_{seed}", started_at.format("%Y%m%d-%H%M%S"));
                let mut candidate = root.join(&stem);
                let mut k = 1;
                while candidate.exists() {
                    candidate = root.join(format!("{stem}-{k}"));
                    k += 1;
                }
                candidate
            }
        };
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            command: command.to_string(),
            seed,
            outputs: Vec::new(),
            started: Instant::now(),
            started_at,
        })
    }

    /// Write `name` inside the run directory through a temporary file.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let target = self.path.join(name);
        let tmp = self.path.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
        self.record(name);
        Ok(target)
    }

    /// Note a file that was written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    /// Write `manifest.toml` describing this run and how it ended.
    pub fn write_manifest(
        &self,
        config: Option<&ExperimentConfig>,
        args: &BTreeMap<String, String>,
        outcome: std::result::Result<(), &Error>,
    ) -> Result<PathBuf> {
        let (status, exit_code, error) = match outcome {
            Ok(()) => ("ok", 0, None),
            Err(e) => ("error", exit_code(e), Some(e.to_string())),
        };
        let manifest = Manifest {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            started: self.started_at.to_rfc3339(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            status,
            exit_code,
            error,
            outputs: &self.outputs,
            args,
            config,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let path = self.path.join(MANIFEST_NAME);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// 2 for configuration errors, 3 for numeric failures, 4 for I/O and
/// checkpoint-format errors.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InsufficientCorpus { .. } | Error::TooLong { .. } => 2,
        Error::NonFinite(_) | Error::StateOverflow { .. } | Error::Diverged { .. } | Error::CalibrationAborted { .. } => 3,
        Error::Io { .. } | Error::CorruptCheckpoint(_) | Error::VersionMismatch { .. } => 4,
    }
}
