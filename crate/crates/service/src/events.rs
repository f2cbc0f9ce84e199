//! Append-only JSONL event log with strictly increasing sequence numbers.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log io error: {0}")]
    Io(#[from] io::Error),
    #[error("event log line {line} is corrupt: {message}")]
    Corrupt { line: usize, message: String },
    #[error("event serialization failed: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Session,
    Turn,
    Click,
    Export,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    /// Milliseconds since the Unix epoch, or the sequence number under a
    /// logical clock.
    pub ts: u64,
    pub kind: EventKind,
    pub payload: Value,
}

struct Writer {
    file: File,
    next_seq: u64,
}

pub struct EventLog {
    path: PathBuf,
    logical_clock: bool,
    writer: Mutex<Writer>,
}

/// Parses a log's text. A final line without its newline is a torn write;
/// its byte offset is returned so it can be cut off.
fn parse_lines(text: &str) -> Result<(Vec<EventRecord>, Option<usize>), LogError> {
    let mut records: Vec<EventRecord> = Vec::new();
    let mut offset = 0;
    for (i, chunk) in text.split_inclusive('\n').enumerate() {
        let complete = chunk.ends_with('\n');
        let line = chunk.trim_end_matches('\n');
        if line.trim().is_empty() {
            offset += chunk.len();
            continue;
        }
        if !complete {
            return Ok((records, Some(offset)));
        }
        let r: EventRecord = serde_json::from_str(line).map_err(|e| LogError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(prev) = records.last() {
            if r.seq <= prev.seq {
                return Err(LogError::Corrupt {
                    line: i + 1,
                    message: format!("sequence {} follows {}", r.seq, prev.seq),
                });
            }
        }
        records.push(r);
        offset += chunk.len();
    }
    Ok((records, None))
}

impl EventLog {
    /// Opens or creates the log at `path` and returns the existing records.
    /// A torn final line is truncated away.
    pub fn open(path: impl AsRef<Path>, logical_clock: bool) -> Result<(Self, Vec<EventRecord>), LogError> {
        let path = path.as_ref().to_owned();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let text = match fs::read(&path) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let (records, torn) = parse_lines(&text)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if let Some(at) = torn {
            tracing::warn!(path = %path.display(), offset = at, "dropping torn final event");
            file.set_len(at as u64)?;
        }
        let next_seq = records.last().map_or(1, |r| r.seq + 1);
        Ok((
            Self {
                path,
                logical_clock,
                writer: Mutex::new(Writer { file, next_seq }),
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one event. The line is written with a single call and
    /// flushed before the record is returned.
    pub fn append(&self, kind: EventKind, payload: Value) -> Result<EventRecord, LogError> {
        self.append_with(kind, |_| payload)
    }

    /// Like [`append`](Self::append), with the payload built from the
    /// record's timestamp.
    pub fn append_with(&self, kind: EventKind, payload: impl FnOnce(u64) -> Value) -> Result<EventRecord, LogError> {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let seq = w.next_seq;
        let ts = if self.logical_clock {
            seq
        } else {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64)
        };
        let record = EventRecord {
            seq,
            ts,
            kind,
            payload: payload(ts),
        };
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        w.file.write_all(&line)?;
        w.file.flush()?;
        w.next_seq += 1;
        Ok(record)
    }

    /// Reads every record currently on disk.
    pub fn read_all(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, LogError> {
        let text = fs::read_to_string(path)?;
        Ok(parse_lines(&text)?.0)
    }
}
