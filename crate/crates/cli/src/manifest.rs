//! Run manifests: everything needed to repeat a command, nothing that
//! changes between identical runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_atomic, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub moltext: &'static str,
    pub checkpoint_format: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    /// Command-line arguments other than the config path and overrides.
    pub args: BTreeMap<String, String>,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub versions: Versions,
    /// sha256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every artifact written.
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            args: BTreeMap::new(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            versions: Versions {
                moltext: env!("CARGO_PKG_VERSION"),
                checkpoint_format: FORMAT_VERSION,
            },
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.args.insert(key.to_string(), value.to_string());
    }

    /// Reads an input file, recording its hash.
    pub fn read_input(&mut self, key: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.arg(key, path.display());
        self.inputs.insert(
            path.display().to_string(),
            hex::encode(Sha256::digest(&bytes)),
        );
        Ok(bytes)
    }

    pub fn read_input_text(&mut self, key: &str, path: &Path) -> Result<String, CliError> {
        let bytes = self.read_input(key, path)?;
        String::from_utf8(bytes).map_err(|e| CliError::io(path, e))
    }

    /// Writes an artifact atomically, recording its hash.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes)?;
        self.outputs.insert(
            path.display().to_string(),
            hex::encode(Sha256::digest(bytes)),
        );
        Ok(())
    }

    /// `<primary>.manifest.json` beside the primary artifact.
    pub fn finish(self, primary: &Path) -> Result<PathBuf, CliError> {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
