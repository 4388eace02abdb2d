//! Output directory handling and the `run.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub engine_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects outputs under one directory and records their digests.
pub struct Run {
    command: String,
    out_dir: PathBuf,
    started_at: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl Run {
    pub fn start(command: &str, out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Input(format!("{}: {e}", out_dir.display())))?;
        Ok(Run {
            command: command.into(),
            out_dir: out_dir.to_path_buf(),
            started_at: now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Records the digest of an input file. Directories contribute the
    /// dataset files they contain.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        if path.is_dir() {
            for name in [
                "manifest.json",
                "decisions.csv",
                "decisions.jsonl",
                "reference_labels.csv",
            ] {
                let p = path.join(name);
                if p.is_file() {
                    self.input(&p)?;
                }
            }
            return Ok(());
        }
        let bytes =
            fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.outputs.push(FileDigest {
            path: name.into(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    pub fn finish<C: Serialize>(self, seed: Option<u64>, config: &C) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            engine_version: panel_triage::engine::ENGINE_VERSION.into(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: self.inputs,
            outputs: self.outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        let path = self.out_dir.join(RUN_MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}
