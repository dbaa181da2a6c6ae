//! Write-ahead journal: one JSON object per line,
//! `{"seq":…,"t_sim":…,"kind":…,"payload":…,"crc32":…}`.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::JournalEvent;
use crate::time::SimTime;

/// One committed event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub t_sim: SimTime,
    #[serde(flatten)]
    pub event: JournalEvent,
}

fn checksum(seq: u64, t_sim: i64, body: &str) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(format!("{seq}|{t_sim}|").as_bytes());
    h.update(body.as_bytes());
    h.finalize()
}

impl JournalRecord {
    /// The record as one journal line, without the trailing newline.
    pub fn encode(&self) -> String {
        let body = serde_json::to_string(&self.event).expect("journal events serialize");
        let crc = checksum(self.seq, self.t_sim.millis(), &body);
        let inner = &body[1..body.len() - 1];
        format!("{{\"seq\":{},\"t_sim\":\"{}\",{inner},\"crc32\":{crc}}}", self.seq, self.t_sim)
    }

    /// Parses and verifies one journal line.
    pub fn decode(line: &str) -> Result<Self, DecodeError> {
        #[derive(Deserialize)]
        struct Raw<'a> {
            seq: u64,
            t_sim: SimTime,
            kind: String,
            #[serde(borrow)]
            payload: Option<&'a RawValue>,
            crc32: u32,
        }
        let raw: Raw = serde_json::from_str(line).map_err(|e| DecodeError::Malformed(e.to_string()))?;
        let kind = serde_json::to_string(&raw.kind).expect("string serializes");
        let body = match raw.payload {
            Some(p) => format!("{{\"kind\":{kind},\"payload\":{}}}", p.get()),
            None => format!("{{\"kind\":{kind}}}"),
        };
        if checksum(raw.seq, raw.t_sim.millis(), &body) != raw.crc32 {
            return Err(DecodeError::Checksum);
        }
        let event: JournalEvent = serde_json::from_str(&body).map_err(|e| DecodeError::Malformed(e.to_string()))?;
        Ok(JournalRecord { seq: raw.seq, t_sim: raw.t_sim, event })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("checksum mismatch")]
    Checksum,
}

/// Where committed records go. A record is committed once `append` returns Ok.
pub trait JournalSink: Send {
    fn append(&mut self, line: &str) -> io::Result<()>;
}

/// An in-memory journal whose lines can be read while it is in use.
#[derive(Debug, Clone, Default)]
pub struct MemoryJournal {
    lines: Arc<Mutex<Vec<String>>>,
}

impl MemoryJournal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> Vec<String> {
        self.lines.lock().expect("journal lock").clone()
    }

    /// The journal as file text, one record per line.
    pub fn text(&self) -> String {
        self.lines().iter().map(|l| format!("{l}\n")).collect()
    }
}

impl JournalSink for MemoryJournal {
    fn append(&mut self, line: &str) -> io::Result<()> {
        self.lines.lock().expect("journal lock").push(line.to_string());
        Ok(())
    }
}

/// Appends to `<dir>/<experiment-id>.journal`, flushing each record.
#[derive(Debug)]
pub struct FileJournal {
    file: File,
    path: PathBuf,
    sync: bool,
}

impl FileJournal {
    pub fn path_for(dir: &Path, experiment_id: &str) -> PathBuf {
        dir.join(format!("{experiment_id}.journal"))
    }

    /// Creates a new journal; fails if one already exists.
    pub fn create(dir: &Path, experiment_id: &str) -> io::Result<Self> {
        let path = Self::path_for(dir, experiment_id);
        let file = OpenOptions::new().write(true).create_new(true).open(&path)?;
        Ok(FileJournal { file, path, sync: false })
    }

    /// Opens an existing journal for appending after cutting it to
    /// `valid_len` bytes (dropping a torn or corrupt tail).
    pub fn reopen(path: &Path, valid_len: u64) -> io::Result<Self> {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        file.set_len(valid_len)?;
        file.seek(SeekFrom::End(0))?;
        Ok(FileJournal { file, path: path.to_path_buf(), sync: false })
    }

    /// Also fsync after every record.
    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl JournalSink for FileJournal {
    fn append(&mut self, line: &str) -> io::Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf)?;
        self.file.flush()?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

/// Why reading stopped before the end of the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    /// 1-based line number of the first record not applied.
    pub line: usize,
    pub reason: String,
}

/// The valid prefix of a journal.
#[derive(Debug, Clone, PartialEq)]
pub struct JournalPrefix {
    pub records: Vec<JournalRecord>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    /// Set when a corrupt record stopped reading mid-stream. A torn final
    /// line is dropped silently and does not set this.
    pub truncated: Option<Truncation>,
}

/// Reads records until the first invalid one. A final line without a newline
/// that fails to parse is a torn write and is ignored; any other failure, or
/// a sequence gap, stops reading and is reported.
pub fn read_journal(reader: impl io::Read) -> io::Result<JournalPrefix> {
    let mut reader = BufReader::new(reader);
    let mut records: Vec<JournalRecord> = Vec::new();
    let mut valid_len = 0u64;
    let mut truncated = None;
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() && complete {
            valid_len += n as u64;
            continue;
        }
        let decoded = JournalRecord::decode(text);
        let expected_seq = records.last().map_or(1, |r| r.seq + 1);
        match decoded {
            Ok(rec) if rec.seq == expected_seq => {
                records.push(rec);
                valid_len += n as u64;
            }
            Ok(rec) => {
                truncated = Some(Truncation {
                    line: line_no,
                    reason: format!("sequence gap: expected {expected_seq}, found {}", rec.seq),
                });
                break;
            }
            Err(_) if !complete => {
                // torn final write
                let mut rest = String::new();
                if reader.read_line(&mut rest)? == 0 {
                    break;
                }
                truncated = Some(Truncation { line: line_no, reason: "unterminated record".into() });
                break;
            }
            Err(e) => {
                truncated = Some(Truncation { line: line_no, reason: e.to_string() });
                break;
            }
        }
    }
    Ok(JournalPrefix { records, valid_len, truncated })
}

pub fn read_journal_file(path: &Path) -> io::Result<JournalPrefix> {
    read_journal(File::open(path)?)
}
