//! Reproducibility manifests written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub format_version: u32,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Digests of `path` itself, or of every regular file below it.
fn digest_tree(path: &Path, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| CliError::io(path, e))?;
        entries.sort();
        for p in entries {
            if p.file_name().is_some_and(|n| n == MANIFEST_NAME) {
                continue;
            }
            digest_tree(&p, out)?;
        }
    } else {
        out.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(())
}

/// Collects inputs and written files for one command, then writes the
/// manifest into the output directory.
pub struct Recorder {
    started: Instant,
    out_dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(out_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        Ok(Recorder {
            started: Instant::now(),
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Registers a file already written below the output directory.
    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(beatnet_core::Error::from)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(self, config: serde_json::Value, seed: Option<u64>) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            digest_tree(p, &mut inputs)?;
        }
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            digest_tree(p, &mut outputs)?;
        }
        let manifest = RunManifest {
            command_line: std::env::args().collect(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            format_version: beatnet_core::FORMAT_VERSION,
            inputs,
            outputs,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).map_err(beatnet_core::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}
