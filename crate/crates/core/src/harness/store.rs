//! Run directories: staged writes, per-directory locks and the run record.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_RECORD: &str = "run.json";
/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CROSSBAND_OUT";

/// Contents of `run.json`, written last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    /// Files in the run directory, sorted, excluding this record.
    pub files: Vec<String>,
    pub version: String,
}

impl RunRecord {
    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        let p = run_dir.as_ref().join(RUN_RECORD);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Default output root: `$CROSSBAND_OUT`, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// First `<root>/<prefix>-<n>` that does not exist yet.
pub fn next_run_dir(root: &Path, prefix: &str) -> PathBuf {
    (1..)
        .map(|n| root.join(format!("{prefix}-{n:03}")))
        .find(|p| !p.exists() && !with_suffix(p, ".partial").exists())
        .expect("unbounded search")
}

/// Exclusive lock on a run directory, held as `<dir>.lock`.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = with_suffix(run_dir, ".lock");
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::RunDir {
                    path: run_dir.to_path_buf(),
                    message: format!("locked by another run ({})", path.display()),
                },
                _ => Error::io(&path, e),
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A run directory under construction. Files go to `<dir>.partial`, which is
/// renamed to `<dir>` by [`RunDir::commit`] and deleted if the run is dropped
/// before that.
#[derive(Debug)]
pub struct RunDir {
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
    _lock: RunLock,
}

impl RunDir {
    pub fn create(target: impl Into<PathBuf>) -> Result<Self> {
        let target = target.into();
        let lock = RunLock::acquire(&target)?;
        if target.exists() {
            return Err(Error::RunDir {
                path: target,
                message: "already exists; completed runs are never overwritten".into(),
            });
        }
        let staging = with_suffix(&target, ".partial");
        if staging.exists() {
            // left behind by a crashed run; we hold the lock, so it is stale
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(Self {
            target,
            staging,
            committed: false,
            _lock: lock,
        })
    }

    /// Directory to write into while the run is in progress.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.staging.join(CONFIG_FILE);
        fs::write(&p, cfg.to_toml_string()?).map_err(|e| Error::io(&p, e))
    }

    /// Writes the run record and moves the directory into place.
    pub fn commit(mut self, command: &str, seed: u64) -> Result<PathBuf> {
        let mut files = Vec::new();
        collect_files(&self.staging, &self.staging, &mut files)?;
        files.sort();
        let record = RunRecord {
            run_id: self
                .target
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            command: command.into(),
            seed,
            files,
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let p = self.staging.join(RUN_RECORD);
        fs::write(&p, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&p, e))?;
        fs::rename(&self.staging, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("walk stays under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_staging_into_place() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("run-a");
        let run = RunDir::create(&target).unwrap();
        fs::write(run.path().join("x.txt"), "1").unwrap();
        assert!(tmp.path().join("run-a.partial").is_dir());
        assert!(tmp.path().join("run-a.lock").is_file());
        let done = run.commit("test", 5).unwrap();
        assert_eq!(done, target);
        assert!(!tmp.path().join("run-a.partial").exists());
        assert!(!tmp.path().join("run-a.lock").exists());
        let rec = RunRecord::load(&target).unwrap();
        assert_eq!(rec.files, vec!["x.txt"]);
        assert_eq!((rec.run_id.as_str(), rec.seed), ("run-a", 5));
        assert!(RunDir::create(&target).is_err());
    }

    #[test]
    fn dropped_run_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("r");
        {
            let run = RunDir::create(&target).unwrap();
            fs::write(run.path().join("half.bin"), "..").unwrap();
        }
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn second_writer_is_locked_out() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("r");
        let _first = RunDir::create(&target).unwrap();
        let err = RunDir::create(&target).unwrap_err().to_string();
        assert!(err.contains("locked"), "{err}");
    }

    #[test]
    fn next_dir_skips_existing() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir(tmp.path().join("train-001")).unwrap();
        assert_eq!(
            next_run_dir(tmp.path(), "train"),
            tmp.path().join("train-002")
        );
    }
}
