//! Append-only event logs with periodic snapshots.
//!
//! Layout under the store root:
//!
//! ```text
//! sessions/{id}/events.jsonl    one LogRecord per line
//! sessions/{id}/snapshot.json   {"seq": n, "session": ...}, rewritten every few events
//! report_counter.json           {"next": n}
//! ```
//!
//! An event is validated against the current session, written and synced
//! before the in-memory state moves on, so anything a caller has seen
//! acknowledged survives a crash. Opening a session replays its log from the
//! latest usable snapshot.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::clock::Clock;
use crate::error::{Error, Result, Warning};
use crate::model::{Session, SessionEvent, SessionGenesis};

pub const DEFAULT_SNAPSHOT_EVERY: u64 = 8;
const EVENTS_FILE: &str = "events.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
const COUNTER_FILE: &str = "report_counter.json";

/// One line of an event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub event_type: String,
    /// `null` for events without a payload.
    pub payload: Value,
}

impl LogRecord {
    pub fn new(seq: u64, timestamp: DateTime<Utc>, event: &SessionEvent) -> Result<Self> {
        let mut value = serde_json::to_value(event)?;
        let payload = value
            .as_object_mut()
            .and_then(|o| o.remove("payload"))
            .unwrap_or(Value::Null);
        Ok(LogRecord {
            seq,
            timestamp,
            event_type: event.kind().name().to_string(),
            payload,
        })
    }

    pub fn event(&self) -> Result<SessionEvent> {
        let mut tagged = serde_json::Map::new();
        tagged.insert("event_type".into(), Value::String(self.event_type.clone()));
        if !self.payload.is_null() {
            tagged.insert("payload".into(), self.payload.clone());
        }
        Ok(serde_json::from_value(Value::Object(tagged))?)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    session: Session,
}

#[derive(Serialize, Deserialize)]
struct Counter {
    next: u64,
}

/// Test hook that simulates the process dying at an append.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailPoint {
    /// The n-th append from now (1-based) and every later one fail before writing.
    BeforeAppend(u64),
    /// Like `BeforeAppend`, but half of the record reaches the file first.
    TornAppend(u64),
}

/// Observer of acknowledged events.
pub type Listener = Arc<dyn Fn(&SessionUpdate<'_>) + Send + Sync>;

pub struct SessionUpdate<'a> {
    pub session_id: &'a str,
    pub record: &'a LogRecord,
    pub session: &'a Session,
}

struct State {
    session: Session,
    seq: u64,
}

struct Slot {
    /// Held for a whole operation so events of one session never interleave.
    writer: Mutex<()>,
    state: RwLock<State>,
}

pub struct SessionStore {
    root: PathBuf,
    snapshot_every: u64,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
    counter: Mutex<()>,
    appends: AtomicU64,
    fail_point: Mutex<Option<(FailPoint, u64)>>,
    warnings: Mutex<Vec<Warning>>,
    listeners: RwLock<Vec<Listener>>,
}

/// Exclusive right to append to one session, lent by [`SessionStore::with_writer`].
pub struct SessionWriter<'a> {
    store: &'a SessionStore,
    id: &'a str,
    slot: &'a Slot,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let sessions = root.join("sessions");
        fs::create_dir_all(&sessions).map_err(|e| Error::io(&sessions, e))?;
        Ok(SessionStore {
            root,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            slots: Mutex::new(HashMap::new()),
            counter: Mutex::new(()),
            appends: AtomicU64::new(0),
            fail_point: Mutex::new(None),
            warnings: Mutex::new(Vec::new()),
            listeners: RwLock::new(Vec::new()),
        })
    }

    /// Snapshot interval in events; 0 disables snapshots.
    pub fn with_snapshot_every(mut self, n: u64) -> Self {
        self.snapshot_every = n;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_fail_point(&self, point: Option<FailPoint>) {
        let base = self.appends.load(Ordering::SeqCst);
        *lock(&self.fail_point) = point.map(|p| (p, base));
    }

    pub fn subscribe(&self, listener: Listener) {
        self.listeners
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .push(listener);
    }

    /// Recovery warnings collected while opening logs.
    pub fn take_warnings(&self) -> Vec<Warning> {
        std::mem::take(&mut *lock(&self.warnings))
    }

    fn session_dir(&self, id: &str) -> Result<PathBuf> {
        let valid = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(Error::NotFound(format!("session {id}")));
        }
        Ok(self.root.join("sessions").join(id))
    }

    /// Session ids with a log on disk, sorted.
    pub fn ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("sessions");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().join(EVENTS_FILE).is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Writes the genesis record of a new session.
    pub fn create(&self, id: &str, genesis: SessionGenesis, clock: &dyn Clock) -> Result<Session> {
        let dir = self.session_dir(id)?;
        let session = Session::from_genesis(id.to_string(), genesis.clone())?;
        let slot = {
            let mut slots = lock(&self.slots);
            if slots.contains_key(id) || dir.exists() {
                return Err(Error::Usage(format!("session {id} already exists")));
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let slot = Arc::new(Slot {
                writer: Mutex::new(()),
                state: RwLock::new(State {
                    session: session.clone(),
                    seq: 0,
                }),
            });
            slots.insert(id.to_string(), slot.clone());
            slot
        };
        let record = LogRecord::new(1, clock.now(), &SessionEvent::SessionCreated(genesis))?;
        let _guard = lock(&slot.writer);
        if let Err(e) = self.write_record(&dir, &record) {
            lock(&self.slots).remove(id);
            let _ = fs::remove_dir_all(&dir);
            return Err(e);
        }
        self.commit(id, &slot, &dir, record, session.clone())?;
        Ok(session)
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>> {
        if let Some(s) = lock(&self.slots).get(id) {
            return Ok(s.clone());
        }
        let dir = self.session_dir(id)?;
        if !dir.join(EVENTS_FILE).is_file() {
            return Err(Error::NotFound(format!("session {id}")));
        }
        let (session, seq) = self.recover(id, &dir)?;
        let mut slots = lock(&self.slots);
        Ok(slots
            .entry(id.to_string())
            .or_insert_with(|| {
                Arc::new(Slot {
                    writer: Mutex::new(()),
                    state: RwLock::new(State { session, seq }),
                })
            })
            .clone())
    }

    /// Latest acknowledged state.
    pub fn get(&self, id: &str) -> Result<Session> {
        Ok(self.snapshot(id)?.0)
    }

    /// Latest acknowledged state with the sequence number of its last event.
    pub fn snapshot(&self, id: &str) -> Result<(Session, u64)> {
        let slot = self.slot(id)?;
        let state = slot.state.read().unwrap_or_else(|e| e.into_inner());
        Ok((state.session.clone(), state.seq))
    }

    /// Runs `f` while holding the session's writer lock.
    pub fn with_writer<T>(&self, id: &str, f: impl FnOnce(&SessionWriter<'_>) -> Result<T>) -> Result<T> {
        let slot = self.slot(id)?;
        let _guard = lock(&slot.writer);
        f(&SessionWriter {
            store: self,
            id,
            slot: &slot,
        })
    }

    /// Every record of a session's log, in order.
    pub fn records(&self, id: &str) -> Result<Vec<LogRecord>> {
        let dir = self.session_dir(id)?;
        let path = dir.join(EVENTS_FILE);
        if !path.is_file() {
            return Err(Error::NotFound(format!("session {id}")));
        }
        let (records, _) = read_log(&path)?;
        Ok(records)
    }

    /// Allocates the next report number from the persisted counter.
    pub fn next_report_number(&self) -> Result<u64> {
        let _g = lock(&self.counter);
        let path = self.root.join(COUNTER_FILE);
        let next = match fs::read_to_string(&path) {
            Ok(raw) => {
                serde_json::from_str::<Counter>(&raw)
                    .map_err(|e| Error::Parse {
                        path: path.clone(),
                        line: 1,
                        message: e.to_string(),
                    })?
                    .next
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 1,
            Err(e) => return Err(Error::io(&path, e)),
        };
        crate::write_json_atomic(&path, &Counter { next: next + 1 })?;
        Ok(next)
    }

    fn check_fail_point(&self) -> Option<(FailPoint, u64)> {
        let n = self.appends.fetch_add(1, Ordering::SeqCst) + 1;
        let fp = *lock(&self.fail_point);
        fp.and_then(|(p, base)| {
            let at = match p {
                FailPoint::BeforeAppend(k) | FailPoint::TornAppend(k) => base + k,
            };
            (n >= at).then_some((p, n))
        })
    }

    fn write_record(&self, dir: &Path, record: &LogRecord) -> Result<()> {
        let path = dir.join(EVENTS_FILE);
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if let Some((point, n)) = self.check_fail_point() {
            if let FailPoint::TornAppend(_) = point {
                let half = &line.as_bytes()[..line.len() / 2];
                file.write_all(half).map_err(|e| Error::io(&path, e))?;
            }
            return Err(Error::SimulatedCrash(n));
        }
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|e| Error::io(&path, e))
    }

    fn commit(&self, id: &str, slot: &Slot, dir: &Path, record: LogRecord, session: Session) -> Result<()> {
        {
            let mut state = slot.state.write().unwrap_or_else(|e| e.into_inner());
            state.session = session.clone();
            state.seq = record.seq;
        }
        if self.snapshot_every > 0 && record.seq % self.snapshot_every == 0 {
            let snap = Snapshot {
                seq: record.seq,
                session: session.clone(),
            };
            if let Err(e) = crate::write_json_atomic(&dir.join(SNAPSHOT_FILE), &snap) {
                tracing::warn!(session = id, error = %e, "snapshot write failed");
            }
        }
        let update = SessionUpdate {
            session_id: id,
            record: &record,
            session: &session,
        };
        for l in self.listeners.read().unwrap_or_else(|e| e.into_inner()).iter() {
            l(&update);
        }
        Ok(())
    }

    fn recover(&self, id: &str, dir: &Path) -> Result<(Session, u64)> {
        let path = dir.join(EVENTS_FILE);
        let (records, torn) = read_log(&path)?;
        if let Some(valid_len) = torn {
            let line = records.len() + 1;
            tracing::warn!(session = id, line, "dropping torn record at the end of the log");
            lock(&self.warnings).push(Warning::TornLogTail { line });
            let f = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            f.set_len(valid_len).map_err(|e| Error::io(&path, e))?;
        }
        for (i, r) in records.iter().enumerate() {
            if r.seq != i as u64 + 1 {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: format!("expected seq {}, found {}", i + 1, r.seq),
                });
            }
        }
        let last = records.len() as u64;
        if last == 0 {
            // Only a torn genesis record was ever written.
            return Err(Error::NotFound(format!("session {id}")));
        }

        if let Some(snap) = read_snapshot(dir).filter(|s| s.seq <= last && s.session.id() == id) {
            let mut session = snap.session;
            for r in &records[snap.seq as usize..] {
                session = session.apply_event(&r.event()?)?;
            }
            return Ok((session, last));
        }
        let events: Vec<SessionEvent> = records.iter().map(LogRecord::event).collect::<Result<_>>()?;
        Ok((Session::replay(id, &events)?, last))
    }
}

fn read_snapshot(dir: &Path) -> Option<Snapshot> {
    let raw = fs::read_to_string(dir.join(SNAPSHOT_FILE)).ok()?;
    serde_json::from_str(&raw).ok()
}

/// Parses a log. A final line that is unterminated and unparsable is a torn
/// write; its byte offset is returned so the caller can cut it off.
fn read_log(path: &Path) -> Result<(Vec<LogRecord>, Option<u64>)> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut offset = 0u64;
    let mut lines = raw.split_inclusive('\n').enumerate().peekable();
    while let Some((i, line)) = lines.next() {
        let is_last = lines.peek().is_none();
        let terminated = line.ends_with('\n');
        let body = line.trim_end_matches('\n');
        if body.trim().is_empty() {
            offset += line.len() as u64;
            continue;
        }
        match serde_json::from_str::<LogRecord>(body) {
            Ok(r) if terminated || !is_last => records.push(r),
            Ok(_) => return Ok((records, Some(offset))),
            Err(_) if is_last && !terminated => return Ok((records, Some(offset))),
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
        offset += line.len() as u64;
    }
    Ok((records, None))
}

impl SessionWriter<'_> {
    pub fn session(&self) -> Session {
        self.slot
            .state
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .session
            .clone()
    }

    pub fn id(&self) -> &str {
        self.id
    }

    /// Validates, persists and applies one event; returns the new state.
    pub fn append(&self, event: SessionEvent, clock: &dyn Clock) -> Result<Session> {
        let (current, seq) = {
            let s = self.slot.state.read().unwrap_or_else(|e| e.into_inner());
            (s.session.clone(), s.seq)
        };
        let next = current.apply_event(&event)?;
        let record = LogRecord::new(seq + 1, clock.now(), &event)?;
        let dir = self.store.session_dir(self.id)?;
        self.store.write_record(&dir, &record)?;
        self.store.commit(self.id, self.slot, &dir, record, next.clone())?;
        Ok(next)
    }
}
