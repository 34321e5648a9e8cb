//! Output directories: exclusive lock and the per-run manifest.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".ser.lock";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Holds `<dir>/.ser.lock` for the lifetime of the value.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Run(format!(
                    "{} is in use by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                ))
            } else {
                CliError::Run(format!("{}: {e}", path.display()))
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a training-type run produced; read back by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: String,
    pub audio_encoder: String,
    pub text_encoder: Option<String>,
    pub parameters: usize,
    pub trainable_parameters: usize,
}

impl RunSummary {
    pub fn modality(&self) -> &'static str {
        if self.text_encoder.is_some() {
            "Audio + Text"
        } else {
            "Audio"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command line after the program name.
    pub arguments: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: u64,
    /// Version of the tool that wrote the artifacts.
    pub artifact_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub output_dir: PathBuf,
    pub summary: Option<RunSummary>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn begin(command: &str, arguments: Vec<String>, config: Option<PathBuf>, seed: u64, output_dir: &Path) -> Self {
        Self {
            command: command.to_owned(),
            arguments,
            config,
            seed,
            artifact_version: format!("ser {}", env!("CARGO_PKG_VERSION")),
            started_unix: unix_now(),
            finished_unix: 0,
            output_dir: output_dir.to_owned(),
            summary: None,
        }
    }

    pub fn finish(mut self, dir: &Path) -> CliResult<()> {
        self.finished_unix = unix_now();
        fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_fails_until_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = OutputLock::acquire(dir.path()).unwrap();
        let err = OutputLock::acquire(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        drop(first);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::begin("eval", vec!["--seed".into(), "3".into()], None, 3, dir.path());
        m.clone().finish(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.command, "eval");
        assert_eq!(back.arguments, m.arguments);
        assert!(back.finished_unix >= back.started_unix);
    }
}
