//! Append-only JSONL journal. Each line is one complete record, written and
//! synced before the in-memory state changes; a torn final line is dropped
//! on open.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wwh_core::corpus::{Demographics, PersonaAttribute};

use crate::engine::TurnLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Record {
    Session {
        session_id: String,
        user_id: String,
        demographics: Demographics,
    },
    /// A user turn and the agent reply, committed together.
    Turn { session_id: String, turn: TurnLog },
    PersonaAdd { user_id: String, attribute: PersonaAttribute },
    PersonaDelete { user_id: String, id: String },
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
}

pub struct Journal {
    path: PathBuf,
    file: File,
    len: u64,
}

impl Journal {
    /// Opens or creates the journal and returns it with its records.
    pub fn open(path: &Path) -> Result<(Self, Vec<Record>), JournalError> {
        let io_err = |source| JournalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err)?;
        let mut buf = String::new();
        file.read_to_string(&mut buf).map_err(io_err)?;
        let mut records = Vec::new();
        let mut good = 0usize;
        let mut lines = buf.split_inclusive('\n').enumerate().peekable();
        while let Some((n, line)) = lines.next() {
            let last = lines.peek().is_none();
            let complete = line.ends_with('\n');
            match serde_json::from_str::<Record>(line.trim_end()) {
                Ok(r) if complete => {
                    records.push(r);
                    good += line.len();
                }
                Err(e) if !last => {
                    return Err(JournalError::Corrupt {
                        path: path.display().to_string(),
                        line: n + 1,
                        message: e.to_string(),
                    })
                }
                _ => {
                    tracing::warn!(line = n + 1, "dropping torn journal tail");
                    break;
                }
            }
        }
        if good < buf.len() {
            file.set_len(good as u64).map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                len: good as u64,
            },
            records,
        ))
    }

    /// On failure the file is cut back to its previous length.
    pub fn append(&mut self, record: &Record) -> Result<(), JournalError> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        match self.file.write_all(line.as_bytes()).and_then(|_| self.file.sync_data()) {
            Ok(()) => {
                self.len += line.len() as u64;
                Ok(())
            }
            Err(source) => {
                let _ = self.file.set_len(self.len);
                Err(JournalError::Io {
                    path: self.path.display().to_string(),
                    source,
                })
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
