//! Content-addressed stage caching. Every output unit has a `.key` file next
//! to its primary output holding the SHA-256 of the stage name, its config
//! subsection and the contents of its inputs. A unit whose key matches and
//! whose outputs all exist is skipped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tdd_core::io::write_atomic;

use crate::error::{CliError, Result};

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct KeyBuilder(Sha256);

impl KeyBuilder {
    pub fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"stage\0");
        h.update(stage.as_bytes());
        Self(h)
    }

    pub fn config(mut self, name: &str, value: &impl Serialize) -> Self {
        let json = serde_json::to_vec(value).expect("config serializes");
        self.0.update(b"\0config\0");
        self.0.update(name.as_bytes());
        self.0.update((json.len() as u64).to_le_bytes());
        self.0.update(&json);
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.0.update(b"\0input\0");
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(&bytes);
        Ok(self)
    }

    pub fn inputs<'a>(mut self, paths: impl IntoIterator<Item = &'a Path>) -> Result<Self> {
        for p in paths {
            self = self.input(p)?;
        }
        Ok(self)
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn key_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".key");
    s.into()
}

pub fn is_fresh(key: &str, outputs: &[PathBuf]) -> bool {
    let Some(primary) = outputs.first() else {
        return false;
    };
    outputs.iter().all(|p| p.exists())
        && fs::read_to_string(key_path(primary)).is_ok_and(|k| k.trim() == key)
}

/// Records `key` once all outputs have been written.
pub fn commit(key: &str, outputs: &[PathBuf]) -> Result<()> {
    let primary = outputs
        .first()
        .ok_or_else(|| CliError::internal("cache unit without outputs"))?;
    write_atomic(&key_path(primary), format!("{key}\n").as_bytes())?;
    Ok(())
}

/// Computed and cached unit counts of one stage run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageCount {
    pub computed: usize,
    pub cached: usize,
}

impl StageCount {
    pub fn add(self, other: StageCount) -> StageCount {
        StageCount {
            computed: self.computed + other.computed,
            cached: self.cached + other.cached,
        }
    }
}

/// Runs `work` unless the unit is fresh; `work` must write every output.
pub fn run_unit(key: &str, outputs: &[PathBuf], work: impl FnOnce() -> Result<()>) -> Result<StageCount> {
    if is_fresh(key, outputs) {
        return Ok(StageCount { computed: 0, cached: 1 });
    }
    if let Some(p) = outputs.first() {
        let _ = fs::remove_file(key_path(p));
    }
    work()?;
    if let Some(missing) = outputs.iter().find(|p| !p.exists()) {
        return Err(CliError::internal(format!("stage did not write {}", missing.display())));
    }
    commit(key, outputs)?;
    Ok(StageCount { computed: 1, cached: 0 })
}
