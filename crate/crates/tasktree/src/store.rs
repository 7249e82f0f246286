//! Append-only event logs, one JSON-lines file per session.
//!
//! Each line is one [`SessionEvent`] with a `"v"` schema field:
//!
//! ```text
//! {"v":1,"seq":1,"session_id":"…","timestamp":…,"kind":"SessionCreated","payload":{…}}
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tasktree_core::{replay, ReplayError, SessionEvent, SessionState};
use thiserror::Error;

pub const LOG_VERSION: u32 = 1;
const LOG_EXT: &str = "jsonl";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt log {path} at line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("corrupt log {path}: {source}")]
    Replay { path: PathBuf, source: ReplayError },
}

impl LogError {
    fn io(path: &Path, source: io::Error) -> Self {
        LogError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for every variant that means the file content is bad, as opposed
    /// to the file being unreadable.
    pub fn is_corrupt(&self) -> bool {
        !matches!(self, LogError::Io { .. })
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    v: u32,
    #[serde(flatten)]
    event: &'a SessionEvent,
}

#[derive(Deserialize)]
struct RecordIn {
    v: u32,
    #[serde(flatten)]
    event: SessionEvent,
}

pub fn encode_event(event: &SessionEvent) -> String {
    serde_json::to_string(&RecordOut {
        v: LOG_VERSION,
        event,
    })
    .expect("events always serialize")
}

/// Decode one log line. Unknown kinds, wrong versions and payloads that do
/// not fit their kind are all reported as a reason string.
pub fn decode_line(line: &str) -> Result<SessionEvent, String> {
    let record: RecordIn = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if record.v != LOG_VERSION {
        return Err(format!("unsupported record version {}", record.v));
    }
    Ok(record.event)
}

pub fn read_log(path: &Path) -> Result<Vec<SessionEvent>, LogError> {
    let text = fs::read_to_string(path).map_err(|e| LogError::io(path, e))?;
    let corrupt = |line: usize, reason: String| LogError::Corrupt {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        events.push(decode_line(line).map_err(|r| corrupt(i + 1, r))?);
    }
    if events.is_empty() {
        return Err(corrupt(0, "log is empty".into()));
    }
    Ok(events)
}

pub fn load_session(path: &Path) -> Result<(SessionState, Vec<SessionEvent>), LogError> {
    let events = read_log(path)?;
    let state = replay(&events).map_err(|source| LogError::Replay {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((state, events))
}

/// Appends events to one session file, syncing after every line.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: Option<File>,
}

impl LogWriter {
    /// A writer with no backing file; appends are accepted and dropped.
    pub fn detached() -> Self {
        Self {
            path: PathBuf::new(),
            file: None,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &SessionEvent) -> Result<(), LogError> {
        let Some(file) = self.file.as_mut() else {
            return Ok(());
        };
        let mut line = encode_event(event);
        line.push('\n');
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|e| LogError::io(&self.path, e))
    }
}

/// Directory of session logs.
#[derive(Debug, Clone)]
pub struct EventStore {
    dir: PathBuf,
}

impl EventStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LogError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| LogError::io(&dir, e))?;
        let meta = fs::metadata(&dir).map_err(|e| LogError::io(&dir, e))?;
        if !meta.is_dir() {
            return Err(LogError::io(
                &dir,
                io::Error::new(io::ErrorKind::InvalidInput, "not a directory"),
            ));
        }
        // Fail early on read-only directories rather than on the first append.
        let probe = dir.join(".write-probe");
        File::create(&probe)
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| LogError::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.{LOG_EXT}"))
    }

    /// New, empty log. Fails if one already exists for the id.
    pub fn create(&self, session_id: &str) -> Result<LogWriter, LogError> {
        let path = self.path_for(session_id);
        let file = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| LogError::io(&path, e))?;
        Ok(LogWriter {
            path,
            file: Some(file),
        })
    }

    pub fn reopen(&self, session_id: &str) -> Result<LogWriter, LogError> {
        let path = self.path_for(session_id);
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| LogError::io(&path, e))?;
        Ok(LogWriter {
            path,
            file: Some(file),
        })
    }

    /// Paths of all session logs, sorted.
    pub fn list(&self) -> Result<Vec<PathBuf>, LogError> {
        let mut out: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| LogError::io(&self.dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == LOG_EXT))
            .collect();
        out.sort();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tasktree_core::EventBody;

    fn created(seq: u64) -> SessionEvent {
        SessionEvent {
            seq,
            session_id: "abc".into(),
            timestamp: 7,
            body: EventBody::SessionCreated {
                query: "I want to plan a trip to Tokyo".into(),
                max_depth: 2,
            },
        }
    }

    #[test]
    fn record_carries_version() {
        let line = encode_event(&created(1));
        assert!(line.starts_with(r#"{"v":1,"seq":1,"#), "{line}");
        assert_eq!(decode_line(&line).unwrap(), created(1));
    }

    #[test]
    fn decode_rejects_bad_records() {
        let line = encode_event(&created(1));
        assert!(decode_line(&line.replace(r#""v":1"#, r#""v":2"#)).is_err());
        assert!(decode_line(&line.replace("SessionCreated", "SessionDeleted")).is_err());
        assert!(decode_line(&line.replace(r#""max_depth":2"#, r#""max_depth":"x""#)).is_err());
        assert!(decode_line(r#"{"seq":1}"#).is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let store = EventStore::open(dir.path()).unwrap();
        let mut w = store.create("abc").unwrap();
        w.append(&created(1)).unwrap();
        assert!(store.create("abc").is_err());
        let (state, events) = load_session(&store.path_for("abc")).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(state.query(), "I want to plan a trip to Tokyo");
        assert_eq!(store.list().unwrap(), vec![store.path_for("abc")]);
    }

    #[test]
    fn empty_and_gapped_logs_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_session(&empty).unwrap_err().is_corrupt());

        let gapped = dir.path().join("g.jsonl");
        let mut second = created(3);
        second.body = EventBody::PreferencesUpdated { text: "x".into() };
        fs::write(
            &gapped,
            format!("{}\n{}\n", encode_event(&created(1)), encode_event(&second)),
        )
        .unwrap();
        let err = load_session(&gapped).unwrap_err();
        assert!(matches!(
            err,
            LogError::Replay {
                source: ReplayError::Gap { expected: 2, found: 3 },
                ..
            }
        ));
    }

    #[test]
    fn open_rejects_files() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        assert!(EventStore::open(&file).is_err());
    }
}
