//! Run directories: config echo, artifacts and a manifest of their hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input files by name, with their hashes.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the run, with their hashes.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub struct RunDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Creates `dir` and writes the resolved config echo into it.
    pub fn create(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let echo = cfg.to_toml();
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, &echo).with_context(|| format!("writing {}", path.display()))?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                tool: env!("CARGO_PKG_NAME").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                seed: cfg.seed,
                config_sha256: sha256_hex(echo.as_bytes()),
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Records the hash of an input file under its file name.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let mut key = name.clone();
        let mut i = 1;
        while self.manifest.inputs.contains_key(&key) {
            i += 1;
            key = format!("{name}#{i}");
        }
        self.manifest.inputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    /// Records the hash of a file already written into the run directory.
    pub fn artifact(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        self.manifest.artifacts.insert(name.to_string(), sha256_file(&path)?);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)?;
        self.write_text(name, &text)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.artifact(name)
    }

    pub fn finish(self) -> Result<Manifest> {
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}
