//! On-disk layout of a service data directory.
//!
//! ```text
//! events.jsonl        append-only, one {"seq": n, ...event} object per line
//! snapshot.json       State after some event; an optimisation only
//! checkpoints/*.json  model checkpoints referenced by name
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::state::{Event, State};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    log: File,
    since_snapshot: usize,
    snapshot_every: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| ServiceError::storage(tmp.display(), e))?;
    fs::rename(&tmp, path).map_err(|e| ServiceError::storage(path.display(), e))
}

/// Every event in the log, in order. A torn final line from a crash is dropped.
pub fn read_events(dir: &Path) -> Result<Vec<LoggedEvent>> {
    let path = dir.join(EVENTS_FILE);
    let file = File::open(&path).map_err(|e| ServiceError::storage(path.display(), e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| ServiceError::storage(path.display(), e))?;
    let mut events = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LoggedEvent>(line) {
            Ok(ev) => events.push(ev),
            Err(e) if i == last => log::warn!("dropping torn final event line: {e}"),
            Err(e) => return Err(ServiceError::storage(format!("{}:{}", path.display(), i + 1), e)),
        }
    }
    Ok(events)
}

/// Rebuild state from the log alone.
pub fn replay(events: &[LoggedEvent]) -> State {
    let mut state = State::default();
    for ev in events {
        state.apply(ev.seq, &ev.event);
    }
    state
}

impl Store {
    /// Start a fresh data directory. Fails if one already holds a log.
    pub fn create(dir: &Path, snapshot_every: usize) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| ServiceError::storage(dir.display(), e))?;
        let path = dir.join(EVENTS_FILE);
        let log = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::storage(path.display(), e))?;
        Ok(Self {
            dir: dir.to_owned(),
            log,
            since_snapshot: 0,
            snapshot_every,
        })
    }

    /// Open an existing directory: snapshot plus the events after it.
    pub fn open(dir: &Path, snapshot_every: usize) -> Result<(Self, State)> {
        let events = read_events(dir)?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let mut state = match fs::read(&snapshot_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| ServiceError::storage(snapshot_path.display(), e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => State::default(),
            Err(e) => return Err(ServiceError::storage(snapshot_path.display(), e)),
        };
        let mut replayed = 0;
        let after = state.seq;
        for ev in events.iter().filter(|ev| ev.seq > after) {
            state.apply(ev.seq, &ev.event);
            replayed += 1;
        }
        if state.train.is_empty() {
            return Err(ServiceError::Storage(format!("{} holds no initialised service", dir.display())));
        }
        let path = dir.join(EVENTS_FILE);
        let log = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::storage(path.display(), e))?;
        Ok((
            Self {
                dir: dir.to_owned(),
                log,
                since_snapshot: replayed,
                snapshot_every,
            },
            state,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR).join(name)
    }

    /// Durably append `event` as number `state.seq + 1`, then apply it.
    pub fn commit(&mut self, state: &mut State, event: Event) -> Result<()> {
        let logged = LoggedEvent {
            seq: state.seq + 1,
            event,
        };
        let mut line = serde_json::to_vec(&logged).map_err(|e| ServiceError::storage("encoding event", e))?;
        line.push(b'\n');
        self.log
            .write_all(&line)
            .and_then(|_| self.log.sync_data())
            .map_err(|e| ServiceError::storage(EVENTS_FILE, e))?;
        state.apply(logged.seq, &logged.event);
        self.since_snapshot += 1;
        if self.since_snapshot >= self.snapshot_every {
            self.snapshot(state)?;
        }
        Ok(())
    }

    pub fn snapshot(&mut self, state: &State) -> Result<()> {
        let bytes = serde_json::to_vec(state).map_err(|e| ServiceError::storage("encoding snapshot", e))?;
        write_atomic(&self.dir.join(SNAPSHOT_FILE), &bytes)?;
        self.since_snapshot = 0;
        Ok(())
    }
}
