//! Persisted form of an experiment run.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    run_session, AcceptRegion, BlockPlan, Experiment, ProtocolError, Response, RoundPlan, SubjectResponder,
    TrialRecord,
};
use crate::subject::{Answer, Percept, SubjectModel};

pub const SESSION_SCHEMA_VERSION: u32 = 1;
/// Responder prefix of trials answered by a simulated subject.
pub const SIMULATED_PREFIX: &str = "sim:";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unsupported session schema {0} (expected {SESSION_SCHEMA_VERSION})")]
    Schema(u32),
    #[error("replay failed: {0}")]
    Replay(#[from] ProtocolError),
    #[error("stored {field} does not match the replayed log")]
    Mismatch { field: &'static str },
    #[error("{mode:?} session holds a trial answered by {responder:?}")]
    MixedResponders { mode: SessionMode, responder: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionMode {
    Simulated,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    InProgress,
    Complete,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub state: SessionState,
    /// Index of the next trial to present.
    pub cursor: usize,
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: u32,
    pub session_id: String,
    pub mode: SessionMode,
    pub subject_label: String,
    /// Model parameters for simulated sessions.
    pub subject: Option<SubjectModel>,
    pub seed: u64,
    pub blocks: Vec<BlockPlan>,
    pub rounds: Vec<RoundPlan>,
    pub trials: Vec<TrialRecord>,
    pub region: Option<AcceptRegion>,
    pub duty_order: Vec<u32>,
    pub bests: BTreeMap<u32, u32>,
    pub status: SessionStatus,
}

/// Stable id for a subject label and seed.
pub fn session_id(label: &str, seed: u64) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{clean}-{seed:016x}")
}

impl SessionRecord {
    pub fn new(
        session_id: String,
        mode: SessionMode,
        subject_label: String,
        subject: Option<SubjectModel>,
        experiment: &Experiment,
    ) -> Self {
        let mut r = SessionRecord {
            schema_version: SESSION_SCHEMA_VERSION,
            session_id,
            mode,
            subject_label,
            subject,
            seed: experiment.seed(),
            blocks: Vec::new(),
            rounds: Vec::new(),
            trials: Vec::new(),
            region: None,
            duty_order: Vec::new(),
            bests: BTreeMap::new(),
            status: SessionStatus {
                state: SessionState::InProgress,
                cursor: 0,
                phase: String::new(),
            },
        };
        r.update(experiment);
        r
    }

    /// Copies the experiment's log and derived state into the record.
    pub fn update(&mut self, e: &Experiment) {
        self.seed = e.seed();
        self.blocks = e.blocks().to_vec();
        self.rounds = e.rounds().to_vec();
        self.trials = e.trials().to_vec();
        self.region = e.region().cloned();
        self.duty_order = e.duty_order().to_vec();
        self.bests = e.bests().clone();
        self.status = SessionStatus {
            state: if e.is_complete() {
                SessionState::Complete
            } else if self.status.state == SessionState::Aborted {
                SessionState::Aborted
            } else {
                SessionState::InProgress
            },
            cursor: e.cursor(),
            phase: e.phase_descriptor(),
        };
    }

    pub fn mark_aborted(&mut self) {
        if self.status.state != SessionState::Complete {
            self.status.state = SessionState::Aborted;
        }
    }

    pub fn resume(&mut self) {
        if self.status.state == SessionState::Aborted {
            self.status.state = SessionState::InProgress;
        }
    }

    /// Rebuilds the live experiment from the seed and trial log.
    pub fn experiment(&self) -> Result<Experiment, SessionError> {
        Ok(Experiment::replay(self.seed, &self.trials)?)
    }

    /// Replays the log and checks every derived field and the responder
    /// provenance of each trial.
    pub fn verify(&self) -> Result<(), SessionError> {
        if self.schema_version != SESSION_SCHEMA_VERSION {
            return Err(SessionError::Schema(self.schema_version));
        }
        for t in &self.trials {
            let simulated = t.responder.starts_with(SIMULATED_PREFIX);
            if simulated != (self.mode == SessionMode::Simulated) {
                return Err(SessionError::MixedResponders {
                    mode: self.mode,
                    responder: t.responder.clone(),
                });
            }
        }
        let e = self.experiment()?;
        let check = |ok: bool, field| if ok { Ok(()) } else { Err(SessionError::Mismatch { field }) };
        check(e.blocks() == self.blocks.as_slice(), "blocks")?;
        check(e.rounds() == self.rounds.as_slice(), "rounds")?;
        check(e.region() == self.region.as_ref(), "region")?;
        check(e.duty_order() == self.duty_order.as_slice(), "duty_order")?;
        check(e.bests() == &self.bests, "bests")?;
        check(e.cursor() == self.status.cursor, "status.cursor")?;
        check(e.is_complete() == (self.status.state == SessionState::Complete), "status.state")?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, SessionError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let version: VersionProbe = serde_json::from_str(text)?;
        if version.schema_version != SESSION_SCHEMA_VERSION {
            return Err(SessionError::Schema(version.schema_version));
        }
        Ok(serde_json::from_str(text)?)
    }

    /// One row per trial:
    /// `subject,section,block,duty_pct,duration_ms,direction,answer1,answer2,rating`.
    /// Section-2 rows carry the round as `r<n>` in the block column.
    pub fn write_trials_csv<W: io::Write>(&self, out: W) -> Result<(), SessionError> {
        write_trials_csv(&self.subject_label, &self.trials, out)
    }
}

/// Session seed for the `index`-th subject of a study seeded with `study_seed`.
pub fn subject_session_seed(study_seed: u64, subject: &SubjectModel) -> u64 {
    study_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ subject.seed
}

/// Runs every subject of `roster` through a complete simulated session.
pub fn simulate_study(roster: &[SubjectModel], study_seed: u64) -> Result<Vec<SessionRecord>, SessionError> {
    roster
        .iter()
        .map(|subject| {
            let seed = subject_session_seed(study_seed, subject);
            let mut responder = SubjectResponder {
                subject: subject.clone(),
                session_key: seed,
            };
            let experiment = run_session(&mut responder, seed)?.into_experiment();
            Ok(SessionRecord::new(
                session_id(&subject.id, seed),
                SessionMode::Simulated,
                subject.id.clone(),
                Some(subject.clone()),
                &experiment,
            ))
        })
        .collect()
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

pub const TRIALS_CSV_HEADER: [&str; 9] = [
    "subject",
    "section",
    "block",
    "duty_pct",
    "duration_ms",
    "direction",
    "answer1",
    "answer2",
    "rating",
];

pub fn write_trials_csv<W: io::Write>(subject: &str, trials: &[TrialRecord], out: W) -> Result<(), SessionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIALS_CSV_HEADER)?;
    for t in trials {
        let block = match (t.block, t.round) {
            (Some(b), _) => b.to_string(),
            (None, Some(r)) => format!("r{r}"),
            (None, None) => String::new(),
        };
        let (a1, a2, rating) = match t.response {
            Response::Judgment { acceptable, percept } => (
                match acceptable {
                    Answer::Yes => "YES",
                    Answer::No => "NO",
                },
                match percept {
                    Percept::Pulse => "PULSE",
                    Percept::Oscillation => "OSCILLATION",
                },
                String::new(),
            ),
            Response::Rating { rating } => ("", "", rating.to_string()),
        };
        w.write_record([
            subject,
            &t.section.to_string(),
            &block,
            &t.duty_pct().to_string(),
            &t.duration_ms().to_string(),
            t.direction.map_or("", |d| d.as_str()),
            a1,
            a2,
            &rating,
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
