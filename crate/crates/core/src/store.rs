//! Append-only JSON-lines store of pipeline runs.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dep::SolverConfig;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("record is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RBarSource {
    Enumerated,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem_digest: String,
    pub delta: Vec<f64>,
    /// `R̄_j` over the nonempty index subsets, by size then lexicographic.
    pub r_bar: Vec<usize>,
    pub family_size: usize,
    pub r_bar_source: RBarSource,
    pub fingerprint: SolverConfig,
    pub seed: u64,
    pub prng: String,
    pub alpha: f64,
    pub eta: f64,
    pub z: usize,
    pub x_star: Vec<f64>,
    pub objective: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub dataset_digest: String,
}

impl RunRecord {
    pub fn check(&self) -> Result<(), StoreError> {
        let expected = 1usize.checked_shl(self.family_size as u32).map(|p| p - 1);
        if expected != Some(self.r_bar.len()) {
            return Err(StoreError::Inconsistent(format!(
                "{} union entries for a family of {}",
                self.r_bar.len(),
                self.family_size
            )));
        }
        if self.fingerprint.start.is_none() {
            return Err(StoreError::Inconsistent("fingerprint lacks a start point".into()));
        }
        Ok(())
    }
}

/// A line that failed to parse; later lines are still read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptRecord {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StoreContents {
    pub records: Vec<RunRecord>,
    pub corrupt: Vec<CorruptRecord>,
}

#[derive(Clone, Debug)]
pub struct RunStore {
    path: PathBuf,
}

impl RunStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one line under an exclusive advisory lock.
    pub fn append(&self, record: &RunRecord) -> Result<(), StoreError> {
        record.check()?;
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.lock()?;
        file.write_all(line.as_bytes())?;
        file.flush()?;
        file.unlock()?;
        Ok(())
    }

    /// Every record in append order. A missing file reads as empty.
    pub fn load(&self) -> Result<StoreContents, StoreError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(StoreContents::default()),
            Err(e) => return Err(e.into()),
        };
        file.lock_shared()?;
        let mut out = StoreContents::default();
        for (i, line) in BufReader::new(&file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<RunRecord>(&line)
                .map_err(StoreError::from)
                .and_then(|r| r.check().map(|_| r));
            match parsed {
                Ok(r) => out.records.push(r),
                Err(e) => out.corrupt.push(CorruptRecord {
                    line: i + 1,
                    message: e.to_string(),
                }),
            }
        }
        file.unlock()?;
        Ok(out)
    }

    /// Records of one problem class, in append order.
    pub fn query(&self, problem_digest: &str) -> Result<StoreContents, StoreError> {
        let mut all = self.load()?;
        all.records.retain(|r| r.problem_digest == problem_digest);
        Ok(all)
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(digest: &str, delta: Vec<f64>, r_bar: Vec<usize>, family_size: usize) -> RunRecord {
        let fingerprint = SolverConfig {
            start: Some(vec![0.0]),
            ..SolverConfig::default()
        };
        RunRecord {
            problem_digest: digest.into(),
            delta,
            r_bar,
            family_size,
            r_bar_source: RBarSource::Enumerated,
            fingerprint,
            seed: 7,
            prng: "chacha8".into(),
            alpha: 0.1,
            eta: 0.5,
            z: 3,
            x_star: vec![3.0],
            objective: 3.0,
            timestamp: 1,
            dataset_digest: "d".into(),
        }
    }

    #[test]
    fn append_and_query_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path().join("runs.jsonl"));
        assert!(store.load().unwrap().records.is_empty());
        let a = record("p", vec![1.0], vec![2], 1);
        let b = record("q", vec![2.0], vec![1, 1, 2], 2);
        store.append(&a).unwrap();
        store.append(&b).unwrap();
        assert_eq!(store.query("p").unwrap().records, vec![a]);
        assert_eq!(store.load().unwrap().records.len(), 2);
    }

    #[test]
    fn corrupt_lines_are_reported_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        let store = RunStore::new(&path);
        store.append(&record("p", vec![], vec![1], 1)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(f, "{{not json").unwrap();
        drop(f);
        store.append(&record("p", vec![], vec![1], 1)).unwrap();
        let got = store.load().unwrap();
        assert_eq!(got.records.len(), 2);
        assert_eq!(got.corrupt.len(), 1);
        assert_eq!(got.corrupt[0].line, 2);
    }

    #[test]
    fn inconsistent_records_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path().join("runs.jsonl"));
        assert!(store.append(&record("p", vec![], vec![1, 2], 2)).is_err());
    }
}
