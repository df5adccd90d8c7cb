//! Durability backends. A commit is one line of newline-delimited JSON; a
//! torn trailing line from a crash is discarded on load.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{BuildJob, PredictionRecord, Project};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    PutJob {
        job: BuildJob,
    },
    RemoveJob {
        job_id: u64,
    },
    PutProject {
        project: Project,
    },
    PutPrediction {
        record: PredictionRecord,
    },
    PutDoc {
        collection: String,
        key: String,
        value: serde_json::Value,
    },
    DeleteDoc {
        collection: String,
        key: String,
    },
    Sequence {
        name: String,
        value: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub version: u64,
    pub mutations: Vec<Mutation>,
}

pub trait Journal: Send {
    fn append(&mut self, commit: &Commit) -> io::Result<()>;
    fn load(&mut self) -> io::Result<Vec<Commit>>;
    /// Atomically replaces the journal with an equivalent, shorter history.
    fn rewrite(&mut self, commits: &[Commit]) -> io::Result<()>;
}

/// No durability; state lives only in memory.
#[derive(Debug, Default)]
pub struct MemoryJournal;

impl Journal for MemoryJournal {
    fn append(&mut self, _commit: &Commit) -> io::Result<()> {
        Ok(())
    }

    fn load(&mut self) -> io::Result<Vec<Commit>> {
        Ok(Vec::new())
    }

    fn rewrite(&mut self, _commits: &[Commit]) -> io::Result<()> {
        Ok(())
    }
}

/// Append-only on-disk journal in `<dir>/journal.ndjson`.
pub struct FileJournal {
    path: PathBuf,
    out: Option<BufWriter<File>>,
    sync: bool,
}

impl FileJournal {
    pub fn open(dir: impl AsRef<Path>, sync: bool) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(FileJournal {
            path: dir.as_ref().join("journal.ndjson"),
            out: None,
            sync,
        })
    }

    fn writer(&mut self) -> io::Result<&mut BufWriter<File>> {
        if self.out.is_none() {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)?;
            self.out = Some(BufWriter::new(file));
        }
        Ok(self.out.as_mut().expect("writer opened"))
    }
}

impl Journal for FileJournal {
    fn append(&mut self, commit: &Commit) -> io::Result<()> {
        let line = serde_json::to_string(commit)?;
        let sync = self.sync;
        let out = self.writer()?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        if sync {
            out.get_ref().sync_data()?;
        }
        Ok(())
    }

    fn load(&mut self) -> io::Result<Vec<Commit>> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut commits = Vec::new();
        let mut valid_len = 0u64;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 || !line.ends_with('\n') {
                break;
            }
            match serde_json::from_str::<Commit>(line.trim_end()) {
                Ok(c) => commits.push(c),
                Err(_) => break,
            }
            valid_len += n as u64;
        }
        // Drop any torn tail so later appends start on a clean line.
        let file = OpenOptions::new().write(true).open(&self.path)?;
        file.set_len(valid_len)?;
        Ok(commits)
    }

    fn rewrite(&mut self, commits: &[Commit]) -> io::Result<()> {
        let tmp = self.path.with_extension("ndjson.tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            for c in commits {
                serde_json::to_writer(&mut out, c)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        self.out = None;
        fs::rename(&tmp, &self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = FileJournal::open(dir.path(), false).unwrap();
        let c = Commit {
            version: 1,
            mutations: vec![Mutation::Sequence {
                name: "x".into(),
                value: 3,
            }],
        };
        j.append(&c).unwrap();
        drop(j);
        let path = dir.path().join("journal.ndjson");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"version\":2,\"mutat").unwrap();
        drop(f);

        let mut j = FileJournal::open(dir.path(), false).unwrap();
        assert_eq!(j.load().unwrap(), vec![c.clone()]);
        let c2 = Commit {
            version: 2,
            mutations: vec![],
        };
        j.append(&c2).unwrap();
        let mut j = FileJournal::open(dir.path(), false).unwrap();
        assert_eq!(j.load().unwrap(), vec![c, c2]);
    }
}
