//! Newline-delimited audit logs: one encoded message per line, append-only.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use embsync_core::message::{decode_message, encode_message, EnhancedMessage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("audit log {0} is empty")]
    Empty(String),
}

pub struct AuditWriter {
    out: BufWriter<File>,
}

impl AuditWriter {
    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: &Path) -> io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn append(&mut self, msg: &EnhancedMessage) -> io::Result<()> {
        self.out.write_all(&encode_message(msg))?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Writes a fresh log, replacing any previous file.
pub fn write_log(path: &Path, messages: &[EnhancedMessage]) -> io::Result<()> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let mut w = AuditWriter::open(path)?;
    for m in messages {
        w.append(m)?;
    }
    w.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogContents {
    pub messages: Vec<EnhancedMessage>,
    /// A line failed to decode; everything from it on was dropped.
    pub truncated: bool,
}

pub fn read_log(path: &Path) -> Result<LogContents, AuditError> {
    let io_err = |source| AuditError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = File::open(path).map_err(io_err)?;
    let mut messages = Vec::new();
    let mut truncated = false;
    for line in BufReader::new(f).split(b'\n') {
        let line = line.map_err(io_err)?;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match decode_message(&line) {
            Ok(m) => messages.push(m),
            Err(_) => {
                truncated = true;
                break;
            }
        }
    }
    if messages.is_empty() {
        return Err(AuditError::Empty(path.display().to_string()));
    }
    Ok(LogContents { messages, truncated })
}
