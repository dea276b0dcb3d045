//! Append-only run registry. Each run gets a fresh directory
//! `runs/<hash12>-<n>`; `registry.jsonl` records status transitions and is
//! only ever appended to.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const INDEX: &str = "registry.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Started,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: String,
    pub config_hash: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug)]
pub struct Registry {
    root: PathBuf,
    lock: Mutex<()>,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CliError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("runs")).map_err(|e| CliError::io(&root, e))?;
        Ok(Registry { root, lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    fn append(&self, entry: &RegistryEntry) -> Result<(), CliError> {
        let path = self.root.join(INDEX);
        let mut line = serde_json::to_string(entry).expect("entry serializes");
        line.push('\n');
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| CliError::io(&path, e))
    }

    /// Creates a new, empty run directory and records the run as started.
    pub fn start(&self, config: &RunConfig) -> Result<(String, PathBuf), CliError> {
        let hash = config.hash();
        let prefix = &hash[..12];
        for n in 0.. {
            let id = format!("{prefix}-{n}");
            let dir = self.run_dir(&id);
            match std::fs::create_dir(&dir) {
                Ok(()) => {
                    self.append(&RegistryEntry {
                        id: id.clone(),
                        config_hash: hash.clone(),
                        seed: config.seed,
                        status: RunStatus::Started,
                        message: None,
                    })?;
                    return Ok((id, dir));
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&dir, e)),
            }
        }
        unreachable!("run ids are unbounded")
    }

    pub fn finish(&self, id: &str, config: &RunConfig, status: RunStatus, message: Option<String>) -> Result<(), CliError> {
        self.append(&RegistryEntry { id: id.to_string(), config_hash: config.hash(), seed: config.seed, status, message })
    }

    /// Latest entry per run id, in first-seen order.
    pub fn entries(&self) -> Result<Vec<RegistryEntry>, CliError> {
        let path = self.root.join(INDEX);
        let f = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(CliError::io(&path, e)),
        };
        let mut out: Vec<RegistryEntry> = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| CliError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: RegistryEntry =
                serde_json::from_str(&line).map_err(|e| CliError::format("registry", e.to_string()))?;
            match out.iter_mut().find(|x| x.id == e.id) {
                Some(x) => *x = e,
                None => out.push(e),
            }
        }
        Ok(out)
    }

    pub fn find(&self, id: &str) -> Result<RegistryEntry, CliError> {
        self.entries()?.into_iter().find(|e| e.id == id).ok_or_else(|| CliError::UnknownRun(id.to_string()))
    }

    /// A completed run with the same config and seed, if any.
    pub fn completed_for(&self, config: &RunConfig) -> Result<Option<RegistryEntry>, CliError> {
        let hash = config.hash();
        Ok(self.entries()?.into_iter().find(|e| e.config_hash == hash && e.status == RunStatus::Completed))
    }
}
