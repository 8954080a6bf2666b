//! Run manifest: resolved configuration, artifact digests, timings and
//! result scalars, written atomically when a command finishes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: Value,
    pub artifacts: BTreeMap<String, Artifact>,
    pub results: BTreeMap<String, Value>,
    pub timings: BTreeMap<String, f64>,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<(u64, String)> {
    let bytes = std::fs::read(path)?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, threads: usize) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            config: serde_json::to_value(config).expect("config serializes"),
            artifacts: BTreeMap::new(),
            results: BTreeMap::new(),
            timings: BTreeMap::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) -> std::io::Result<()> {
        let (bytes, sha256) = sha256_file(path)?;
        self.artifacts.insert(
            name.to_string(),
            Artifact {
                path: path.to_path_buf(),
                bytes,
                sha256,
            },
        );
        Ok(())
    }

    pub fn result(&mut self, name: &str, value: impl Serialize) {
        self.results
            .insert(name.to_string(), serde_json::to_value(value).expect("result serializes"));
    }

    pub fn timing(&mut self, name: &str, since: Instant) {
        self.timings.insert(name.to_string(), since.elapsed().as_secs_f64());
    }

    /// Writes `manifest.json` in `dir` via a temporary file and rename.
    pub fn write(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        if let Some(t) = self.started.take() {
            self.timing("total_seconds", t);
        }
        let path = dir.join(FILE_NAME);
        let tmp = dir.join(format!(".{FILE_NAME}.tmp"));
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&tmp, text + "\n")?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
