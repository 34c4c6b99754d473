use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::SessionEvent;

/// Append-only per-session event log.
pub trait EventStore: Send + Sync {
    /// Appends events in order. Each event is written as one unit.
    fn append(&self, session_id: &str, events: &[SessionEvent]) -> io::Result<()>;
    /// All events for a session, or `None` when the session was never seen.
    fn load(&self, session_id: &str) -> io::Result<Option<Vec<SessionEvent>>>;
}

/// One JSON event per line under `<dir>/<session_id>.jsonl`.
#[derive(Debug)]
pub struct JsonlEventStore {
    dir: PathBuf,
    // Serializes appends so lines from concurrent sessions never share a
    // buffered write.
    write_lock: Mutex<()>,
}

impl JsonlEventStore {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn path_for(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn valid_id(session_id: &str) -> io::Result<()> {
    if session_id.is_empty() || !session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "session id has unsupported characters"));
    }
    Ok(())
}

impl EventStore for JsonlEventStore {
    fn append(&self, session_id: &str, events: &[SessionEvent]) -> io::Result<()> {
        valid_id(session_id)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path_for(session_id))?;
        for event in events {
            let mut line = serde_json::to_string(event).map_err(io::Error::other)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
        }
        file.sync_data()
    }

    fn load(&self, session_id: &str) -> io::Result<Option<Vec<SessionEvent>>> {
        if valid_id(session_id).is_err() {
            return Ok(None);
        }
        let file = match fs::File::open(self.path_for(session_id)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut events = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{session_id}.jsonl line {}: {e}", n + 1))
            })?;
            events.push(event);
        }
        Ok(Some(events))
    }
}

/// In-memory store for tests and throwaway runs.
#[derive(Debug, Default)]
pub struct MemoryEventStore {
    logs: Mutex<HashMap<String, Vec<SessionEvent>>>,
}

impl MemoryEventStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemoryEventStore {
    fn append(&self, session_id: &str, events: &[SessionEvent]) -> io::Result<()> {
        let mut logs = self.logs.lock().unwrap_or_else(|p| p.into_inner());
        logs.entry(session_id.to_string()).or_default().extend_from_slice(events);
        Ok(())
    }

    fn load(&self, session_id: &str) -> io::Result<Option<Vec<SessionEvent>>> {
        Ok(self.logs.lock().unwrap_or_else(|p| p.into_inner()).get(session_id).cloned())
    }
}
