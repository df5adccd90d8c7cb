//! Append-only quarantine for records that could not be ingested.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::model::{ts, EventSource, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    #[serde(with = "ts")]
    pub at: Timestamp,
    pub source: EventSource,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_id: Option<u64>,
    pub record: serde_json::Value,
}

/// JSON-lines log; kept in memory when no path is configured.
#[derive(Debug)]
pub struct DeadLetterLog {
    path: Option<PathBuf>,
    file: Mutex<Option<File>>,
    memory: Mutex<Vec<DeadLetter>>,
}

impl DeadLetterLog {
    pub fn in_memory() -> Self {
        DeadLetterLog {
            path: None,
            file: Mutex::new(None),
            memory: Mutex::new(Vec::new()),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(DeadLetterLog {
            path: Some(path),
            file: Mutex::new(Some(file)),
            memory: Mutex::new(Vec::new()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, letter: DeadLetter) {
        tracing::warn!(reason = %letter.reason, "record quarantined");
        if let Some(f) = self.file.lock().as_mut() {
            let line = serde_json::to_string(&letter).expect("dead letter serializes");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                tracing::error!(error = %e, "dead-letter write failed");
            }
        }
        self.memory.lock().push(letter);
    }

    /// Letters appended through this handle.
    pub fn recent(&self) -> Vec<DeadLetter> {
        self.memory.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.memory.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads a log file; malformed lines are skipped.
    pub fn read(path: impl AsRef<Path>) -> std::io::Result<Vec<DeadLetter>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            if let Ok(letter) = serde_json::from_str(&line?) {
                out.push(letter);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dead.ndjson");
        let log = DeadLetterLog::open(&path).unwrap();
        let letter = DeadLetter {
            at: chrono::DateTime::from_timestamp_millis(0).unwrap(),
            source: EventSource::Webhook,
            reason: "missing job id".into(),
            project_id: None,
            record: serde_json::json!({"x": 1}),
        };
        log.append(letter.clone());
        log.append(letter.clone());
        drop(log);
        assert_eq!(
            DeadLetterLog::read(&path).unwrap(),
            vec![letter.clone(), letter]
        );
    }
}
