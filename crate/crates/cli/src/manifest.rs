//! Output directory bookkeeping and the per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub workers: usize,
    pub config_sha256: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Outputs that carry wall-clock measurements and are left out of
    /// `digest`.
    pub unhashed: Vec<String>,
    /// Hash over the command, seed, config hash and the input and output
    /// hashes. Equal digests mean a bit-identical run.
    pub digest: String,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path.display(), e))
}

/// Collects the files a command reads and writes.
pub struct RunRecord {
    pub root: PathBuf,
    inputs: Vec<(PathBuf, FileHash)>,
    outputs: Vec<FileHash>,
    unhashed: Vec<String>,
}

impl RunRecord {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root.display(), e))?;
        Ok(Self { root: root.to_path_buf(), inputs: Vec::new(), outputs: Vec::new(), unhashed: Vec::new() })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let canon = path.canonicalize().map_err(|e| CliError::io(path.display(), e))?;
        let sha256 = sha256_file(path)?;
        self.inputs.push((canon, FileHash { name: path.display().to_string(), sha256 }));
        Ok(())
    }

    /// Where an output called `name` goes; refuses to overwrite an input.
    pub fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(name);
        if let Ok(canon) = p.canonicalize() {
            if self.inputs.iter().any(|(c, _)| *c == canon) {
                return Err(CliError::Config(format!("output {} would overwrite an input", p.display())));
            }
        }
        Ok(p)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name)?;
        fs::write(&p, bytes).map_err(|e| CliError::io(p.display(), e))?;
        self.outputs.push(FileHash { name: name.into(), sha256: hex(&Sha256::digest(bytes)) });
        Ok(())
    }

    pub fn write_unhashed(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name)?;
        fs::write(&p, bytes).map_err(|e| CliError::io(p.display(), e))?;
        self.unhashed.push(name.into());
        Ok(())
    }

    /// Registers a file some other writer already produced under the root.
    pub fn record(&mut self, name: &str) -> Result<(), CliError> {
        let sha256 = sha256_file(&self.root.join(name))?;
        self.outputs.push(FileHash { name: name.into(), sha256 });
        Ok(())
    }

    pub fn finish(
        self,
        command: &str,
        seed: u64,
        deterministic: bool,
        workers: usize,
        config_sha256: String,
        wall_time_s: f64,
    ) -> Result<Manifest, CliError> {
        let inputs: Vec<FileHash> = self.inputs.into_iter().map(|(_, h)| h).collect();
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(config_sha256.as_bytes());
        for f in &inputs {
            h.update(f.sha256.as_bytes());
        }
        for f in &self.outputs {
            h.update(f.name.as_bytes());
            h.update(f.sha256.as_bytes());
        }
        let manifest = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            deterministic,
            workers,
            config_sha256,
            inputs,
            outputs: self.outputs,
            unhashed: self.unhashed,
            digest: hex(&h.finalize()),
            wall_time_s,
        };
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(path.display(), e))?;
        Ok(manifest)
    }
}
