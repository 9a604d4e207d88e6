//! Append-only CSV results store guarded by an advisory lock file.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Ok,
    /// A numerical flag was raised: boundary hit, certificate slack, cap
    /// binding, clipped measure or a failed identity.
    Warn,
}

/// One record of the results store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub instance_hash: String,
    pub config_digest: String,
    pub study_id: String,
    pub mode: String,
    pub quantity: String,
    /// Extra instance label such as `nu=0.8`.
    pub label: String,
    pub n: Option<usize>,
    pub value: f64,
    pub std_error: f64,
    pub slack: f64,
    pub status: Status,
    pub note: String,
    pub wall_ms: u64,
}

impl ResultRow {
    /// Hash of everything that identifies the instance within its config.
    pub fn instance_hash_of(config_digest: &str, quantity: &str, label: &str, n: Option<usize>) -> String {
        let key = format!("{config_digest}|{quantity}|{label}|{}", n.map_or(String::new(), |n| n.to_string()));
        hex(&Sha256::digest(key.as_bytes()))[..16].to_string()
    }

    /// Equality on every field except the wall time.
    pub fn same_result(&self, other: &Self) -> bool {
        Self { wall_ms: 0, ..self.clone() } == Self { wall_ms: 0, ..other.clone() }
    }
}

/// Exclusive handle on a results file; the lock is released on drop.
#[derive(Debug)]
pub struct ResultStore {
    path: PathBuf,
    lock: PathBuf,
}

impl ResultStore {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut lock = path.as_os_str().to_owned();
        lock.push(".lock");
        let lock = PathBuf::from(lock);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(path.to_path_buf()));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&self) -> Result<Vec<ResultRow>> {
        read_rows(&self.path)
    }

    pub fn append(&self, rows: &[ResultRow]) -> Result<()> {
        let fresh = fs::metadata(&self.path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for row in rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

impl Drop for ResultStore {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Reads a results file without taking the lock; a missing file is empty.
pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    match File::open(path) {
        Ok(f) => Ok(csv::Reader::from_reader(f)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64, n: Option<usize>) -> ResultRow {
        ResultRow {
            instance_hash: ResultRow::instance_hash_of("d", "q", "", n),
            config_digest: "d".into(),
            study_id: "s".into(),
            mode: "primal_dp".into(),
            quantity: "q".into(),
            label: String::new(),
            n,
            value,
            std_error: 0.0,
            slack: 0.0,
            status: Status::Ok,
            note: "a, \"quoted\" note".into(),
            wall_ms: 12,
        }
    }

    #[test]
    fn rows_round_trip_exactly_and_appends_keep_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/results.csv");
        let rows = vec![row(0.1 + 0.2, Some(8)), row(f64::MIN_POSITIVE, None)];
        {
            let store = ResultStore::open(&path).unwrap();
            store.append(&rows[..1]).unwrap();
            store.append(&rows[1..]).unwrap();
            assert_eq!(store.read().unwrap(), rows);
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("instance_hash").count(), 1);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let first = ResultStore::open(&path).unwrap();
        assert!(matches!(ResultStore::open(&path), Err(CliError::Locked(_))));
        drop(first);
        ResultStore::open(&path).unwrap();
    }

    #[test]
    fn same_result_ignores_wall_time() {
        let a = row(1.0, Some(2));
        let b = ResultRow { wall_ms: 999, ..a.clone() };
        assert!(a.same_result(&b));
        assert!(!a.same_result(&ResultRow { value: 1.0 + f64::EPSILON, ..b }));
    }
}
