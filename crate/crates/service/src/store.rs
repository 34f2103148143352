//! Sessions and their on-disk event logs.
//!
//! Each session lives in `<data_dir>/<session_id>.ndjson`: a [`SessionHeader`]
//! line followed by one [`EventRecord`] per line. A batch of submitted events
//! and the engine events it triggers are appended with a single write and
//! synced before the in-memory state changes, so the log is always at least
//! as new as anything a client has been told.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use bi33_core::api::{CreateSession, EventSubmission, SessionHeader, SessionView};
use bi33_core::conduct::{advance, decision_bundle, estimates, DecisionBundle, EngineConfig, FloorCache, PosteriorSummary};
use bi33_core::error::ConductError;
use bi33_core::trial::{self, Actor, CloseReason, Event, EventRecord, TrialState};
use bi33_core::SCHEMA;
use parking_lot::RwLock;
use tokio::sync::Mutex;

use crate::error::ApiError;

/// Everything a read needs, computed once per write.
#[derive(Debug)]
pub struct Snapshot {
    pub view: SessionView,
    pub bundle: DecisionBundle,
    pub estimates: PosteriorSummary,
}

/// Mutable side of a session; only the holder of the writer lock touches it.
struct Writer {
    header: SessionHeader,
    path: PathBuf,
    state: TrialState,
    cache: FloorCache,
    /// Records carrying a client event id, by id.
    ids: HashMap<String, EventRecord>,
    num_events: u64,
    updated_unix_ms: u64,
}

pub struct Session {
    writer: Arc<Mutex<Writer>>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl Session {
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().clone()
    }
}

pub struct Store {
    dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn engine_error(e: ConductError) -> ApiError {
    match e {
        ConductError::Trial(e) => ApiError::Inconsistent(e.to_string()),
        ConductError::Pod(e) => ApiError::Internal(e.to_string()),
    }
}

/// Append `records` to the log with one write, then sync.
fn append(path: &Path, records: &[EventRecord]) -> std::io::Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let mut f = OpenOptions::new().append(true).open(path)?;
    f.write_all(trial::to_ndjson(records).as_bytes())?;
    f.sync_data()
}

impl Writer {
    fn snapshot(&mut self) -> Snapshot {
        let cfg = &self.header.engine;
        let bundle = decision_bundle(&self.state, cfg, &mut self.cache);
        let estimates = estimates(&self.state, cfg, &mut self.cache);
        let h = &self.header;
        Snapshot {
            view: SessionView {
                schema: SCHEMA.to_string(),
                session_id: h.session_id.clone(),
                created_unix_ms: h.created_unix_ms,
                updated_unix_ms: self.updated_unix_ms,
                seed: h.seed,
                grid: h.grid.clone(),
                params: h.params.clone(),
                num_events: self.num_events,
                state: self.state.clone(),
            },
            bundle,
            estimates,
        }
    }

    /// Commit records already applied to `state`: persist, then adopt.
    fn commit(&mut self, state: TrialState, cache: FloorCache, records: Vec<EventRecord>) -> Result<(), ApiError> {
        append(&self.path, &records)?;
        for r in &records {
            if let Some(id) = &r.event_id {
                self.ids.insert(id.clone(), r.clone());
            }
        }
        self.num_events += records.len() as u64;
        if !records.is_empty() {
            self.updated_unix_ms = now_ms();
        }
        self.state = state;
        self.cache = cache;
        Ok(())
    }

    /// Apply a batch of coordinator events, each followed by whatever the engine
    /// decides. All or nothing: on error neither the log nor the state changes.
    fn submit(&mut self, events: Vec<EventSubmission>) -> Result<(), ApiError> {
        let mut state = self.state.clone();
        let mut cache = self.cache.clone();
        let mut records: Vec<EventRecord> = Vec::new();
        let mut batch_ids: HashMap<String, EventRecord> = HashMap::new();
        for (i, sub) in events.into_iter().enumerate() {
            let at = |what: &str| format!("events[{i}].{what}");
            if !sub.time_days.is_finite() || sub.time_days < 0.0 {
                return Err(ApiError::field(&at("time_days"), "must be a finite, non-negative number of days"));
            }
            let manual_close = matches!(sub.event, Event::EnrollmentClosed { reason: CloseReason::Manual });
            if sub.event.is_engine_event() && !manual_close {
                return Err(ApiError::field(&at("kind"), "engine decisions cannot be submitted by a client"));
            }
            if let Some(id) = &sub.event_id {
                if let Some(prev) = self.ids.get(id).or_else(|| batch_ids.get(id)) {
                    if prev.event == sub.event && prev.time_days == sub.time_days {
                        continue;
                    }
                    return Err(ApiError::Inconsistent(format!(
                        "events[{i}]: event_id {id:?} was already used for a different event (seq {})",
                        prev.seq
                    )));
                }
            }
            let mut rec = state.record(sub.time_days, sub.event, Actor::Coordinator);
            rec.event_id = sub.event_id;
            state.apply(&rec).map_err(|e| ApiError::Inconsistent(format!("events[{i}]: {e}")))?;
            if let Some(id) = &rec.event_id {
                batch_ids.insert(id.clone(), rec.clone());
            }
            records.push(rec);
            records.extend(advance(&mut state, &self.header.engine, &mut cache, true).map_err(engine_error)?);
        }
        self.commit(state, cache, records)
    }

    /// Let the engine catch up, e.g. after recovering a log cut short between
    /// a coordinator event and the decisions it triggers.
    fn settle(&mut self) -> Result<(), ApiError> {
        let mut state = self.state.clone();
        let mut cache = self.cache.clone();
        let records = advance(&mut state, &self.header.engine, &mut cache, true).map_err(engine_error)?;
        self.commit(state, cache, records)
    }
}

impl Store {
    /// Open `dir`, creating it if needed, and recover every session log in it.
    pub fn open(dir: impl Into<PathBuf>) -> anyhow::Result<Store> {
        let dir = dir.into();
        fs::create_dir_all(&dir).with_context(|| format!("creating data directory {}", dir.display()))?;
        let mut sessions = HashMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
            .collect();
        paths.sort();
        for path in paths {
            let session = recover(&path).with_context(|| format!("recovering {}", path.display()))?;
            let id = session.snapshot().view.session_id.clone();
            sessions.insert(id, Arc::new(session));
        }
        tracing::info!(dir = %dir.display(), sessions = sessions.len(), "session store opened");
        Ok(Store { dir, sessions: RwLock::new(sessions) })
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    pub fn create(&self, req: CreateSession) -> Result<Arc<Snapshot>, ApiError> {
        let state = TrialState::new(req.grid.clone(), req.params.clone())?;
        let seed = req.seed.unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0);
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let header = SessionHeader {
            schema: SCHEMA.to_string(),
            session_id: session_id.clone(),
            created_unix_ms: now_ms(),
            seed,
            grid: req.grid,
            params: req.params,
            engine: EngineConfig::seeded(seed),
        };
        let path = self.dir.join(format!("{session_id}.ndjson"));
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path)?;
        let line = serde_json::to_string(&header).map_err(|e| ApiError::Internal(e.to_string()))?;
        f.write_all(format!("{line}\n").as_bytes())?;
        f.sync_all()?;
        let mut writer = Writer {
            updated_unix_ms: header.created_unix_ms,
            header,
            path,
            state,
            cache: FloorCache::default(),
            ids: HashMap::new(),
            num_events: 0,
        };
        writer.settle()?;
        let snapshot = Arc::new(writer.snapshot());
        let session = Session { writer: Arc::new(Mutex::new(writer)), snapshot: RwLock::new(snapshot.clone()) };
        self.sessions.write().insert(session_id, Arc::new(session));
        Ok(snapshot)
    }
}

/// Apply events to a session. Writers are serialized per session; the engine
/// work runs on the blocking pool.
pub async fn submit(session: Arc<Session>, events: Vec<EventSubmission>) -> Result<Arc<Snapshot>, ApiError> {
    let mut writer = session.writer.clone().lock_owned().await;
    let session2 = session.clone();
    tokio::task::spawn_blocking(move || {
        writer.submit(events)?;
        let snapshot = Arc::new(writer.snapshot());
        *session2.snapshot.write() = snapshot.clone();
        Ok(snapshot)
    })
    .await
    .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

/// Rebuild a session from its log. A trailing partial line (an interrupted
/// append) is cut off; anything else that fails to parse or replay is an error.
fn recover(path: &Path) -> anyhow::Result<Session> {
    let mut text = fs::read_to_string(path)?;
    if !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        tracing::warn!(path = %path.display(), dropped = text.len() - keep, "truncating interrupted append");
        text.truncate(keep);
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(keep as u64)?;
        f.sync_all()?;
    }
    let mut lines = text.lines();
    let header: SessionHeader = match lines.next() {
        Some(l) => serde_json::from_str(l).context("parsing session header")?,
        None => bail!("empty session log"),
    };
    if header.schema != SCHEMA {
        bail!("unsupported schema {:?}", header.schema);
    }
    let records = trial::from_ndjson(&lines.collect::<Vec<_>>().join("\n")).context("parsing event records")?;
    let state = trial::replay(header.grid.clone(), header.params.clone(), &records)?;
    let ids = records
        .iter()
        .filter_map(|r| r.event_id.clone().map(|id| (id, r.clone())))
        .collect();
    let updated_unix_ms = File::open(path)?
        .metadata()?
        .modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map_or(header.created_unix_ms, |d| d.as_millis() as u64);
    let mut writer = Writer {
        header,
        path: path.to_path_buf(),
        state,
        cache: FloorCache::default(),
        ids,
        num_events: records.len() as u64,
        updated_unix_ms,
    };
    writer.settle().map_err(|e| anyhow::anyhow!("{e:?}"))?;
    let snapshot = Arc::new(writer.snapshot());
    Ok(Session { writer: Arc::new(Mutex::new(writer)), snapshot: RwLock::new(snapshot) })
}

/// Raw log of a session, header line included. Holds the writer lock so the
/// copy never ends in a half-written append.
pub async fn export(session: &Session) -> Result<String, ApiError> {
    let writer = session.writer.lock().await;
    Ok(tokio::fs::read_to_string(&writer.path).await?)
}
