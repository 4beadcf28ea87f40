//! Sessions, interaction entries and the audit log, persisted as an
//! append-only JSONL file.
//!
//! Each mutation is appended and fsynced before it is applied in memory, so
//! anything a caller has seen acknowledged survives a restart. Opening the
//! store replays the file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::pipeline::{ClassificationResult, GenerationResult};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("store {path} line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("session {0} not found")]
    UnknownSession(String),
    #[error("entry {0} not found")]
    UnknownEntry(String),
    #[error("entry {id} already {decision}")]
    AlreadyDecided { id: String, decision: Decision },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Pending,
    Approved,
    Rejected,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Pending => "pending",
            Decision::Approved => "approved",
            Decision::Rejected => "rejected",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEntry {
    pub entry_id: String,
    pub session_id: String,
    pub instruction: String,
    pub created_at: DateTime<Utc>,
    pub classification: Option<ClassificationResult>,
    /// None when generation failed.
    pub generation: Option<GenerationResult>,
    pub error: Option<String>,
    pub decision: Decision,
    pub decided_at: Option<DateTime<Utc>>,
    /// Approval only records intent; nothing is executed on a network.
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditKind {
    Request,
    Classify,
    Generate,
    Approve,
    Reject,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: AuditKind,
    pub session_id: Option<String>,
    pub entry_id: Option<String>,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    SessionCreated(SessionRecord),
    Entry(Box<InteractionEntry>),
    Decision {
        entry_id: String,
        decision: Decision,
        decided_at: DateTime<Utc>,
    },
    Audit(AuditEvent),
}

#[derive(Debug, Default)]
struct State {
    sessions: HashMap<String, SessionRecord>,
    session_entries: HashMap<String, Vec<String>>,
    entries: HashMap<String, InteractionEntry>,
    audit: Vec<AuditEvent>,
}

impl State {
    fn apply(&mut self, r: Record) {
        match r {
            Record::SessionCreated(s) => {
                self.session_entries
                    .entry(s.session_id.clone())
                    .or_default();
                self.sessions.insert(s.session_id.clone(), s);
            }
            Record::Entry(e) => {
                self.session_entries
                    .entry(e.session_id.clone())
                    .or_default()
                    .push(e.entry_id.clone());
                self.entries.insert(e.entry_id.clone(), *e);
            }
            Record::Decision {
                entry_id,
                decision,
                decided_at,
            } => {
                if let Some(e) = self.entries.get_mut(&entry_id) {
                    e.decision = decision;
                    e.decided_at = Some(decided_at);
                }
            }
            Record::Audit(a) => self.audit.push(a),
        }
    }

    fn last_audit_time(&self) -> Option<DateTime<Utc>> {
        self.audit.last().map(|a| a.timestamp)
    }
}

#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    inner: Mutex<(File, State)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session: SessionRecord,
    pub entries: Vec<InteractionEntry>,
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Store, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut state = State::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Record = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                state.apply(rec);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        Ok(Store {
            path,
            inner: Mutex::new((file, state)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn commit(&self, guard: &mut (File, State), rec: Record) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        let io = |source| StoreError::Io {
            path: self.path.display().to_string(),
            source,
        };
        guard.0.write_all(line.as_bytes()).map_err(io)?;
        guard.0.sync_data().map_err(io)?;
        guard.1.apply(rec);
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, (File, State)> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn create_session(&self) -> Result<SessionRecord, StoreError> {
        let s = SessionRecord {
            session_id: Uuid::new_v4().to_string(),
            created_at: Utc::now(),
        };
        let mut g = self.lock();
        self.commit(&mut g, Record::SessionCreated(s.clone()))?;
        Ok(s)
    }

    pub fn session(&self, id: &str) -> Result<SessionView, StoreError> {
        let g = self.lock();
        let session =
            g.1.sessions
                .get(id)
                .cloned()
                .ok_or_else(|| StoreError::UnknownSession(id.to_string()))?;
        let entries = g.1.session_entries[id]
            .iter()
            .filter_map(|e| g.1.entries.get(e).cloned())
            .collect();
        Ok(SessionView { session, entries })
    }

    pub fn has_session(&self, id: &str) -> bool {
        self.lock().1.sessions.contains_key(id)
    }

    pub fn record_entry(
        &self,
        session_id: &str,
        instruction: &str,
        classification: Option<ClassificationResult>,
        generation: Option<GenerationResult>,
        error: Option<String>,
    ) -> Result<InteractionEntry, StoreError> {
        let mut g = self.lock();
        if !g.1.sessions.contains_key(session_id) {
            return Err(StoreError::UnknownSession(session_id.to_string()));
        }
        let entry = InteractionEntry {
            entry_id: Uuid::new_v4().to_string(),
            session_id: session_id.to_string(),
            instruction: instruction.to_string(),
            created_at: Utc::now(),
            classification,
            generation,
            error,
            decision: Decision::Pending,
            decided_at: None,
            dry_run: true,
        };
        self.commit(&mut g, Record::Entry(Box::new(entry.clone())))?;
        Ok(entry)
    }

    pub fn entry(&self, id: &str) -> Result<InteractionEntry, StoreError> {
        self.lock()
            .1
            .entries
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownEntry(id.to_string()))
    }

    /// Moves a pending entry to approved or rejected. Decisions are final.
    pub fn decide(&self, id: &str, decision: Decision) -> Result<InteractionEntry, StoreError> {
        let mut g = self.lock();
        let current =
            g.1.entries
                .get(id)
                .ok_or_else(|| StoreError::UnknownEntry(id.to_string()))?
                .decision;
        if current != Decision::Pending {
            return Err(StoreError::AlreadyDecided {
                id: id.to_string(),
                decision: current,
            });
        }
        self.commit(
            &mut g,
            Record::Decision {
                entry_id: id.to_string(),
                decision,
                decided_at: Utc::now(),
            },
        )?;
        Ok(g.1.entries[id].clone())
    }

    /// Appends an audit event. Timestamps never go backwards, even if the
    /// wall clock does.
    pub fn audit(
        &self,
        kind: AuditKind,
        session_id: Option<&str>,
        entry_id: Option<&str>,
        payload: serde_json::Value,
    ) -> Result<AuditEvent, StoreError> {
        let mut g = self.lock();
        let now = Utc::now();
        let timestamp = match g.1.last_audit_time() {
            Some(last) if last > now => last,
            _ => now,
        };
        let ev = AuditEvent {
            seq: g.1.audit.len() as u64 + 1,
            timestamp,
            kind,
            session_id: session_id.map(str::to_string),
            entry_id: entry_id.map(str::to_string),
            payload,
        };
        self.commit(&mut g, Record::Audit(ev.clone()))?;
        Ok(ev)
    }

    pub fn audit_log(&self) -> Vec<AuditEvent> {
        self.lock().1.audit.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let (sid, eid) = {
            let st = Store::open(&p).unwrap();
            let s = st.create_session().unwrap();
            let e = st
                .record_entry(&s.session_id, "list users", None, None, Some("x".into()))
                .unwrap();
            st.audit(
                AuditKind::Request,
                Some(&s.session_id),
                None,
                json!({"a": 1}),
            )
            .unwrap();
            st.decide(&e.entry_id, Decision::Rejected).unwrap();
            (s.session_id, e.entry_id)
        };
        let st = Store::open(&p).unwrap();
        let view = st.session(&sid).unwrap();
        assert_eq!(view.entries.len(), 1);
        assert_eq!(view.entries[0].decision, Decision::Rejected);
        assert!(view.entries[0].decided_at.is_some());
        assert_eq!(st.audit_log().len(), 1);
        assert!(matches!(
            st.decide(&eid, Decision::Approved),
            Err(StoreError::AlreadyDecided { .. })
        ));
    }

    #[test]
    fn unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let st = Store::open(dir.path().join("s.jsonl")).unwrap();
        assert!(matches!(st.entry("nope"), Err(StoreError::UnknownEntry(_))));
        assert!(matches!(
            st.session("nope"),
            Err(StoreError::UnknownSession(_))
        ));
        assert!(st.record_entry("nope", "x", None, None, None).is_err());
    }

    #[test]
    fn audit_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let st = Store::open(dir.path().join("s.jsonl")).unwrap();
        for _ in 0..50 {
            st.audit(AuditKind::Eval, None, None, json!(null)).unwrap();
        }
        let log = st.audit_log();
        assert!(log
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp && w[0].seq < w[1].seq));
    }

    #[test]
    fn corrupt_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        std::fs::write(&p, "{\"record\":\"nonsense\"}\n").unwrap();
        match Store::open(&p) {
            Err(StoreError::Corrupt { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}
