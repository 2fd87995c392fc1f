//! Session files and the in-memory session table.
//!
//! Each session lives in `<dir>/<session_id>.json`, rewritten atomically
//! after every accepted response and before the reply leaves the service.
//! Requests for one session are serialized by a per-session lock.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use clicksim_core::protocol::{run_session, Ack, Experiment, Prompt, ProtocolError, Response, SubjectResponder};
use clicksim_core::session::{
    session_id, subject_session_seed, SessionError, SessionMode, SessionRecord, SessionState, SessionStatus,
    SIMULATED_PREFIX,
};
use clicksim_core::subject::{default_population, SubjectModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;

/// Responder name used for live answers when the client gives none.
pub const DEFAULT_OPERATOR: &str = "operator";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no session {0:?}")]
    NotFound(String),
    #[error("session {0:?} already exists")]
    Exists(String),
    #[error("{message}")]
    Protocol {
        message: String,
        phase: String,
        source: ProtocolError,
    },
    #[error("session {0:?} is aborted; resume it first")]
    Aborted(String),
    #[error("simulated sessions are answered by the service")]
    SimulatedSession,
    #[error("{0}")]
    BadRequest(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: SessionError },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn session_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

/// Replaces `path` in one step: write a sibling temporary file, flush it to
/// disk and rename it over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn save_session(dir: &Path, record: &SessionRecord) -> Result<PathBuf, StoreError> {
    let path = session_path(dir, &record.session_id);
    let mut text = record.to_json()?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Reads a session file and replays its log against the stored derivations.
pub fn load_session(path: &Path) -> Result<SessionRecord, StoreError> {
    let wrap = |source| StoreError::File {
        path: path.to_owned(),
        source,
    };
    let text = fs::read_to_string(path)?;
    let record = SessionRecord::from_json(&text).map_err(wrap)?;
    record.verify().map_err(wrap)?;
    Ok(record)
}

/// Expands directories to the `*.json` files they hold, in name order.
pub fn session_files(paths: &[PathBuf]) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// A roster id such as `"S3"` or a full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubjectRef {
    Id(String),
    Model(Box<SubjectModel>),
}

impl SubjectRef {
    pub fn resolve(&self) -> Result<SubjectModel, StoreError> {
        let model = match self {
            SubjectRef::Id(id) => default_population()
                .into_iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| StoreError::BadRequest(format!("unknown roster subject {id:?}")))?,
            SubjectRef::Model(m) => (**m).clone(),
        };
        model.validate().map_err(|e| StoreError::BadRequest(e.to_string()))?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub mode: SessionMode,
    #[serde(default)]
    pub subject_label: Option<String>,
    #[serde(default)]
    pub subject: Option<SubjectRef>,
    /// Live: the session seed. Simulated: the study seed, combined with the
    /// subject's own seed exactly as a full simulated study does.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub trial_index: usize,
    pub response: Response,
    #[serde(default)]
    pub timestamp_ms: Option<u64>,
    #[serde(default)]
    pub responder: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitReply {
    pub ack: Ack,
    pub status: SessionStatus,
    pub next: Option<Prompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextReply {
    pub session_id: String,
    pub status: SessionStatus,
    pub prompt: Option<Prompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub mode: SessionMode,
    pub subject_label: String,
    pub seed: u64,
    pub n_trials: usize,
    pub status: SessionStatus,
}

impl From<&SessionRecord> for SessionSummary {
    fn from(r: &SessionRecord) -> Self {
        SessionSummary {
            session_id: r.session_id.clone(),
            mode: r.mode,
            subject_label: r.subject_label.clone(),
            seed: r.seed,
            n_trials: r.trials.len(),
            status: r.status.clone(),
        }
    }
}

struct Entry {
    record: SessionRecord,
    experiment: Experiment,
}

/// Builds a completed simulated session.
pub fn simulate_one(subject: &SubjectModel, label: &str, study_seed: u64) -> Result<SessionRecord, StoreError> {
    let seed = subject_session_seed(study_seed, subject);
    let mut responder = SubjectResponder {
        subject: subject.clone(),
        session_key: seed,
    };
    let experiment = run_session(&mut responder, seed)
        .map_err(SessionError::from)?
        .into_experiment();
    Ok(SessionRecord::new(
        session_id(label, seed),
        SessionMode::Simulated,
        label.to_owned(),
        Some(subject.clone()),
        &experiment,
    ))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub struct Store {
    dir: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Entry>>>>,
}

impl Store {
    /// Opens `dir`, creating it if needed, and loads every session file in
    /// it. A file that fails replay verification stops the open.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut sessions = BTreeMap::new();
        for path in session_files(std::slice::from_ref(&dir))? {
            let record = load_session(&path)?;
            let experiment = record.experiment()?;
            sessions.insert(record.session_id.clone(), Arc::new(Mutex::new(Entry { record, experiment })));
        }
        tracing::info!(dir = %dir.display(), sessions = sessions.len(), "session store opened");
        Ok(Store {
            dir,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>, StoreError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_owned()))
    }

    pub fn create(&self, req: CreateSession) -> Result<SessionRecord, StoreError> {
        let record = match req.mode {
            SessionMode::Simulated => {
                let subject = req
                    .subject
                    .as_ref()
                    .ok_or_else(|| StoreError::BadRequest("simulated sessions need a subject".into()))?
                    .resolve()?;
                let label = req.subject_label.clone().unwrap_or_else(|| subject.id.clone());
                simulate_one(&subject, &label, req.seed)?
            }
            SessionMode::Live => {
                if req.subject.is_some() {
                    return Err(StoreError::BadRequest("live sessions take no subject model".into()));
                }
                let label = req
                    .subject_label
                    .clone()
                    .filter(|l| !l.trim().is_empty())
                    .ok_or_else(|| StoreError::BadRequest("live sessions need a subject_label".into()))?;
                SessionRecord::new(session_id(&label, req.seed), SessionMode::Live, label, None, &Experiment::new(req.seed))
            }
        };
        let experiment = record.experiment()?;
        let mut table = self.sessions.write().expect("session table poisoned");
        if table.contains_key(&record.session_id) {
            return Err(StoreError::Exists(record.session_id));
        }
        save_session(&self.dir, &record)?;
        table.insert(
            record.session_id.clone(),
            Arc::new(Mutex::new(Entry {
                record: record.clone(),
                experiment,
            })),
        );
        Ok(record)
    }

    fn entries(&self) -> Vec<Arc<Mutex<Entry>>> {
        self.sessions.read().expect("session table poisoned").values().cloned().collect()
    }

    pub async fn summaries(&self) -> Vec<SessionSummary> {
        let mut out = Vec::new();
        for e in self.entries() {
            out.push(SessionSummary::from(&e.lock().await.record));
        }
        out
    }

    pub async fn get(&self, id: &str) -> Result<SessionRecord, StoreError> {
        Ok(self.entry(id)?.lock().await.record.clone())
    }

    pub async fn next(&self, id: &str) -> Result<NextReply, StoreError> {
        let entry = self.entry(id)?;
        let e = entry.lock().await;
        Ok(NextReply {
            session_id: id.to_owned(),
            status: e.record.status.clone(),
            prompt: e.experiment.next_prompt(),
        })
    }

    /// Applies one live answer. The session file is rewritten before the
    /// acknowledgement is returned; a repeated identical answer returns the
    /// original acknowledgement without touching the file.
    pub async fn submit(&self, id: &str, req: SubmitRequest) -> Result<SubmitReply, StoreError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock().await;
        if e.record.mode == SessionMode::Simulated {
            return Err(StoreError::SimulatedSession);
        }
        let responder = req.responder.unwrap_or_else(|| DEFAULT_OPERATOR.to_owned());
        if responder.is_empty() || responder.starts_with(SIMULATED_PREFIX) {
            return Err(StoreError::BadRequest(format!("responder {responder:?} is not a live responder")));
        }
        let is_retry = req.trial_index < e.experiment.cursor();
        if e.record.status.state == SessionState::Aborted && !is_retry {
            return Err(StoreError::Aborted(id.to_owned()));
        }
        let mut experiment = e.experiment.clone();
        let ack = experiment
            .submit(req.trial_index, req.response, req.timestamp_ms.unwrap_or_else(now_ms), &responder)
            .map_err(|source| StoreError::Protocol {
                message: source.to_string(),
                phase: e.experiment.phase_descriptor(),
                source,
            })?;
        if !ack.duplicate {
            let mut record = e.record.clone();
            record.update(&experiment);
            save_session(&self.dir, &record)?;
            e.record = record;
            e.experiment = experiment;
        }
        Ok(SubmitReply {
            ack,
            status: e.record.status.clone(),
            next: e.experiment.next_prompt(),
        })
    }

    pub async fn abort(&self, id: &str) -> Result<SessionStatus, StoreError> {
        self.set_state(id, SessionRecord::mark_aborted).await
    }

    pub async fn resume(&self, id: &str) -> Result<SessionStatus, StoreError> {
        self.set_state(id, SessionRecord::resume).await
    }

    async fn set_state(&self, id: &str, f: fn(&mut SessionRecord)) -> Result<SessionStatus, StoreError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock().await;
        let mut record = e.record.clone();
        f(&mut record);
        if record != e.record {
            save_session(&self.dir, &record)?;
            e.record = record;
        }
        Ok(e.record.status.clone())
    }

    /// Copies of the requested sessions, or of every complete session when
    /// `ids` is empty, in session-id order.
    pub async fn snapshot(&self, ids: &[String]) -> Result<Vec<SessionRecord>, StoreError> {
        let mut out = Vec::new();
        if ids.is_empty() {
            for e in self.entries() {
                let e = e.lock().await;
                if e.record.status.state == SessionState::Complete {
                    out.push(e.record.clone());
                }
            }
        } else {
            for id in ids {
                out.push(self.get(id).await?);
            }
        }
        Ok(out)
    }
}
