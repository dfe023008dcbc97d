//! One `run.ini` per output directory recording how its artifacts were made.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use ini::Ini;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run.ini";

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    /// Input files with their SHA-256.
    pub inputs: Vec<(PathBuf, String)>,
    /// Output files relative to the output directory, with their SHA-256.
    pub outputs: Vec<(PathBuf, String)>,
    pub timestamp: u64,
    /// Free-form settings worth keeping next to the artifacts.
    pub notes: Vec<(String, String)>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, seed: u64) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { command: command.into(), config: config.map(Path::to_path_buf), seed, timestamp, ..Self::default() }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.into(), value.to_string()));
    }

    /// Hashes every file under `out` (except the manifest) and writes it.
    pub fn write(mut self, out: &Path) -> anyhow::Result<()> {
        self.outputs.clear();
        let mut files = Vec::new();
        collect_files(out, out, &mut files)?;
        files.sort();
        for rel in files {
            let hash = sha256_file(&out.join(&rel))?;
            self.outputs.push((rel, hash));
        }
        let mut ini = Ini::new();
        ini.with_section(Some("run"))
            .set("command", self.command.as_str())
            .set("config", self.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default())
            .set("seed", self.seed.to_string())
            .set("timestamp", self.timestamp.to_string());
        for (k, v) in &self.notes {
            ini.with_section(Some("settings")).set(k.as_str(), v.as_str());
        }
        for (p, h) in &self.inputs {
            ini.with_section(Some("inputs")).set(p.display().to_string(), h.as_str());
        }
        for (p, h) in &self.outputs {
            ini.with_section(Some("outputs")).set(p.display().to_string(), h.as_str());
        }
        ini.write_to_file(out.join(RUN_MANIFEST)).with_context(|| format!("writing manifest in {}", out.display()))?;
        Ok(())
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.parent() != Some(root) || path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}
