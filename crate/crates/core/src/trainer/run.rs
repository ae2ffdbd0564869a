use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use super::EpochMetrics;

pub const LOCK_FILE: &str = ".lock";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.qvck";
pub const ALLOCATION_FILE: &str = "allocation.csv";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An output directory held under an exclusive lock file, released on drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(path).map_err(io(path))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(io(&lock))?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(RunError::Locked(path.to_path_buf()))
            }
            Err(e) => return Err(io(&lock)(e)),
        }
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// One JSON object per epoch.
    pub fn write_metrics(&self, metrics: &[EpochMetrics]) -> Result<PathBuf, RunError> {
        let path = self.file(METRICS_FILE);
        let mut w = BufWriter::new(File::create(&path).map_err(io(&path))?);
        for m in metrics {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(io(&path))?;
        }
        w.flush().map_err(io(&path))?;
        Ok(path)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Parse a metrics log written by [`RunDir::write_metrics`].
pub fn read_metrics(text: &str) -> Result<Vec<EpochMetrics>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
