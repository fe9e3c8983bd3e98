use std::path::Path;

use serde::Serialize;

use latode::checkpoint::sha256_hex;

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::runtime(format!("{}: {}", path.display(), e)))?;
        Ok(FileRef { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }
}

/// Everything needed to regenerate the artifacts next to it.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRef>,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<FileRef>,
}

impl Manifest {
    pub fn new(command: &'static str, config: &impl Serialize, seed: Option<u64>) -> Self {
        let config = serde_json::to_value(config).expect("configuration serializes");
        let config_hash = sha256_hex(config.to_string().as_bytes());
        Manifest {
            tool: "latode",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            config_hash,
            seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        self.inputs.push(FileRef::of(path)?);
        Ok(self)
    }

    /// Hashes `names` inside `dir` and writes `dir/manifest.json`.
    pub fn write(mut self, dir: &Path, names: &[&str]) -> Result<(), CliError> {
        for name in names {
            let mut r = FileRef::of(&dir.join(name))?;
            r.path = name.to_string();
            self.artifacts.push(r);
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        write_file(&dir.join("manifest.json"), text.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {}", path.display(), e)))
}
