//! Append-only crash database (`crashdb.jsonl`).

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use civfuzz_core::crash::CrashRecord;
use serde::{Deserialize, Serialize};

pub const CRASHDB_FILE: &str = "crashdb.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum DbEvent {
    New { record: Box<CrashRecord> },
    Duplicate { key: String, run: u64 },
}

pub struct CrashStore {
    path: PathBuf,
    file: File,
}

impl CrashStore {
    /// Opens `dir/crashdb.jsonl` for appending, creating `dir` if needed.
    pub fn create(dir: &Path) -> std::io::Result<CrashStore> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CRASHDB_FILE);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(CrashStore { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, ev: &DbEvent) -> std::io::Result<()> {
        let mut line = serde_json::to_string(ev)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())
    }

    pub fn append_new(&mut self, record: &CrashRecord) -> std::io::Result<()> {
        self.append(&DbEvent::New {
            record: Box::new(record.clone()),
        })
    }

    pub fn append_duplicate(&mut self, key: &str, run: u64) -> std::io::Result<()> {
        self.append(&DbEvent::Duplicate { key: key.into(), run })
    }
}

pub fn read_events(path: &Path) -> std::io::Result<Vec<DbEvent>> {
    let file = File::open(path)?;
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
