//! Sessions as a fold over an append-only event log (one JSON object per line).

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use dosefind::{PolicySpec, TrialConfig};
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { id: String, config: TrialConfig, policy: PolicySpec },
    Outcome { id: String, dose: f64, y: u8, recommended: Option<f64> },
}

impl Event {
    pub fn id(&self) -> &str {
        match self {
            Event::Created { id, .. } | Event::Outcome { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    /// Administered dose; the posterior conditions on this one.
    pub dose: f64,
    pub y: u8,
    pub recommended: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub config: TrialConfig,
    pub policy: PolicySpec,
    pub outcomes: Vec<OutcomeRecord>,
}

impl Session {
    pub fn observations(&self) -> Vec<(f64, bool)> {
        self.outcomes.iter().map(|o| (o.dose, o.y == 1)).collect()
    }

    pub fn engine(&self) -> Result<Engine, ApiError> {
        Engine::new(self.config, &self.policy)
    }
}

/// Applies `event` to the session map.
pub fn apply(sessions: &mut BTreeMap<String, Session>, event: &Event) -> Result<(), ApiError> {
    match event {
        Event::Created { id, config, policy } => {
            if sessions.contains_key(id) {
                return Err(ApiError::Log(format!("session {id} created twice")));
            }
            sessions.insert(id.clone(), Session { id: id.clone(), config: *config, policy: policy.clone(), outcomes: Vec::new() });
        }
        Event::Outcome { id, dose, y, recommended } => {
            let s = sessions.get_mut(id).ok_or_else(|| ApiError::Log(format!("outcome for unknown session {id}")))?;
            s.outcomes.push(OutcomeRecord { dose: *dose, y: *y, recommended: *recommended });
        }
    }
    Ok(())
}

/// Session states reconstructed from an event sequence.
pub fn replay(events: &[Event]) -> Result<BTreeMap<String, Session>, ApiError> {
    let mut sessions = BTreeMap::new();
    for e in events {
        apply(&mut sessions, e)?;
    }
    Ok(sessions)
}

pub fn read_log(path: &Path) -> Result<Vec<Event>, ApiError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut events = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| ApiError::Log(format!("line {}: {e}", i + 1)))?;
        events.push(e);
    }
    Ok(events)
}

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct Store {
    log: Option<Mutex<File>>,
    sessions: RwLock<BTreeMap<String, SessionHandle>>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store { log: None, sessions: RwLock::new(BTreeMap::new()) }
    }

    /// Replays the log at `path` (if any) and appends new events to it.
    pub fn open(path: &Path) -> Result<Self, ApiError> {
        let sessions = replay(&read_log(path)?)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let sessions = sessions.into_iter().map(|(k, v)| (k, Arc::new(tokio::sync::Mutex::new(v)))).collect();
        Ok(Store { log: Some(Mutex::new(file)), sessions: RwLock::new(sessions) })
    }

    fn append(&self, event: &Event) -> Result<(), ApiError> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(event).map_err(|e| ApiError::Log(e.to_string()))?;
            line.push('\n');
            let mut f = log.lock().map_err(|_| ApiError::Log("log lock poisoned".into()))?;
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .read()
            .map_err(|_| ApiError::Log("session map poisoned".into()))?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    pub fn create(&self, config: TrialConfig, policy: PolicySpec) -> Result<String, ApiError> {
        let id = uuid::Uuid::new_v4().to_string();
        let event = Event::Created { id: id.clone(), config, policy: policy.clone() };
        self.append(&event)?;
        let session = Session { id: id.clone(), config, policy, outcomes: Vec::new() };
        self.sessions
            .write()
            .map_err(|_| ApiError::Log("session map poisoned".into()))?
            .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        Ok(id)
    }

    /// Persists an outcome and applies it to `session`, which the caller holds locked.
    pub fn record(&self, session: &mut Session, dose: f64, y: u8, recommended: Option<f64>) -> Result<(), ApiError> {
        self.append(&Event::Outcome { id: session.id.clone(), dose, y, recommended })?;
        session.outcomes.push(OutcomeRecord { dose, y, recommended });
        Ok(())
    }

    /// Snapshot of every session, for replay comparisons.
    pub async fn snapshot(&self) -> Result<BTreeMap<String, Session>, ApiError> {
        let handles: Vec<SessionHandle> = self
            .sessions
            .read()
            .map_err(|_| ApiError::Log("session map poisoned".into()))?
            .values()
            .cloned()
            .collect();
        let mut out = BTreeMap::new();
        for h in handles {
            let s = h.lock().await.clone();
            out.insert(s.id.clone(), s);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_rejects_orphans_and_duplicates() {
        let created = Event::Created { id: "a".into(), config: TrialConfig::five_fu(), policy: PolicySpec::named("ewoc") };
        let orphan = Event::Outcome { id: "b".into(), dose: 150.0, y: 0, recommended: None };
        assert!(replay(&[created.clone(), created.clone()]).is_err());
        assert!(replay(&[created.clone(), orphan]).is_err());
        let ok = Event::Outcome { id: "a".into(), dose: 150.0, y: 1, recommended: Some(211.25) };
        let s = replay(&[created, ok]).unwrap();
        assert_eq!(s["a"].observations(), vec![(150.0, true)]);
    }

    #[test]
    fn events_serialize_one_per_line() {
        let e = Event::Outcome { id: "a".into(), dose: 150.0, y: 1, recommended: None };
        let line = serde_json::to_string(&e).unwrap();
        assert!(!line.contains('\n'));
        assert!(line.contains("\"event\":\"outcome\""));
        assert_eq!(serde_json::from_str::<Event>(&line).unwrap(), e);
    }
}
