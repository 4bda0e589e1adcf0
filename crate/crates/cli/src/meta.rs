use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Reproducibility record attached to every output.
#[derive(Clone, Debug, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: Value,
    pub config_sha256: String,
    /// SHA-256 of each input file, keyed by flag name.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Metadata {
    pub fn new(command: &'static str, seed: u64, threads: Option<usize>, config: Value) -> Self {
        let canonical = serde_json::to_string(&config).expect("json values serialize");
        Self {
            tool: "unikw",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            threads,
            config_sha256: sha256_hex(canonical.as_bytes()),
            config,
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        let hash = if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            let mut h = Sha256::new();
            for p in entries {
                h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
                h.update(read_bytes(&p)?);
            }
            h.finalize().iter().map(|b| format!("{b:02x}")).collect()
        } else {
            sha256_hex(&read_bytes(path)?)
        };
        self.inputs.insert(name.to_string(), hash);
        Ok(())
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn read_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// `<out>.meta.json` next to an output whose own format has no room for it.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    out.with_file_name(name)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
