//! Two-section click-quality experiment.
//!
//! Section 1 sweeps 26 durations up and down at each duty level, asking
//! whether the click is acceptable and whether it felt like one pulse.
//! The smallest and largest accepted durations bound a region per duty.
//! Section 2 then narrows in on each subject's favourite duration in
//! three rating rounds with 5, 10 and 5 ms resolution.
//!
//! [`Experiment`] is pull-based: ask for the next [`Prompt`], then
//! [`submit`](Experiment::submit) the answer. The complete plan is a pure
//! function of the seed and the responses received so far, so a session
//! is resumed by replaying its log.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::StimulusParams;
use crate::subject::{Answer, Percept, SubjectModel, TrialContext, MAX_RATING};

pub const DUTY_LEVELS: [u32; 3] = [5, 25, 50];
pub const MIN_DURATION_MS: u32 = 1;
pub const MAX_DURATION_MS: u32 = 251;
pub const SWEEP_STEP_MS: u32 = 10;
pub const SWEEP_LEVELS: usize = 26;
pub const PRESENTATIONS: usize = 3;
pub const SECTION1_TRIALS: usize = DUTY_LEVELS.len() * 2 * SWEEP_LEVELS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("{phase} expects {expected}")]
    WrongKind { phase: String, expected: String },
    #[error("trial {index} was already answered differently")]
    Conflict { index: usize },
    #[error("expected a response to trial {expected}, got trial {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("session is complete")]
    Complete,
    #[error("rating {0} outside 0..=7")]
    InvalidRating(u8),
    #[error("invalid plan: {0}")]
    Plan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Increasing,
    Decreasing,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Increasing => "INCREASING",
            Direction::Decreasing => "DECREASING",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub duty_pct: u32,
    pub direction: Direction,
    pub durations: Vec<u32>,
}

/// 1, 11, …, 251 ms, reversed for a decreasing sweep.
pub fn sweep_durations(direction: Direction) -> Vec<u32> {
    let mut d: Vec<u32> = (0..SWEEP_LEVELS as u32).map(|k| MIN_DURATION_MS + SWEEP_STEP_MS * k).collect();
    if direction == Direction::Decreasing {
        d.reverse();
    }
    d
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Six sweep blocks, one per duty level and direction, in seeded order.
pub fn plan_section1(seed: u64) -> Vec<BlockPlan> {
    let mut blocks: Vec<BlockPlan> = DUTY_LEVELS
        .iter()
        .flat_map(|&duty_pct| {
            [Direction::Increasing, Direction::Decreasing].map(|direction| BlockPlan {
                duty_pct,
                direction,
                durations: sweep_durations(direction),
            })
        })
        .collect();
    blocks.shuffle(&mut rng(seed, 1));
    blocks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Judgment,
    Rating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    Judgment { acceptable: Answer, percept: Percept },
    Rating { rating: u8 },
}

impl Response {
    pub fn kind(&self) -> ResponseKind {
        match self {
            Response::Judgment { .. } => ResponseKind::Judgment,
            Response::Rating { .. } => ResponseKind::Rating,
        }
    }
}

/// Next stimulus awaiting a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub trial_index: usize,
    pub section: u8,
    pub block: Option<usize>,
    pub round: Option<u8>,
    pub direction: Option<Direction>,
    pub params: StimulusParams,
    pub expects: ResponseKind,
}

impl Prompt {
    pub fn duty_pct(&self) -> u32 {
        self.params.duty_cycle_pct() as u32
    }

    pub fn duration_ms(&self) -> u32 {
        self.params.duration_ms() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub section: u8,
    pub block: Option<usize>,
    pub round: Option<u8>,
    pub direction: Option<Direction>,
    pub params: StimulusParams,
    pub response: Response,
    pub timestamp_ms: u64,
    pub responder: String,
}

impl TrialRecord {
    pub fn duty_pct(&self) -> u32 {
        self.params.duty_cycle_pct() as u32
    }

    pub fn duration_ms(&self) -> u32 {
        self.params.duration_ms() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationRange {
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Acceptable-duration bounds per duty; `None` where nothing was accepted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptRegion {
    pub bounds: BTreeMap<u32, Option<DurationRange>>,
}

impl AcceptRegion {
    pub fn get(&self, duty_pct: u32) -> Option<DurationRange> {
        self.bounds.get(&duty_pct).copied().flatten()
    }

    pub fn duties(&self) -> impl Iterator<Item = (u32, DurationRange)> + '_ {
        self.bounds.iter().filter_map(|(d, r)| r.map(|r| (*d, r)))
    }
}

/// Region bounds from section-1 records. Per duty and sweep the smallest
/// and largest accepted durations are taken, then averaged over the
/// sweeps that accepted anything.
pub fn extract_boundaries(records: &[TrialRecord]) -> AcceptRegion {
    let mut per_sweep: BTreeMap<(u32, Direction), (u32, u32)> = BTreeMap::new();
    let mut seen: BTreeMap<u32, ()> = BTreeMap::new();
    for r in records.iter().filter(|r| r.section == 1) {
        let duty = r.duty_pct();
        seen.insert(duty, ());
        let (Some(direction), Response::Judgment { acceptable: Answer::Yes, .. }) = (r.direction, r.response) else {
            continue;
        };
        let d = r.duration_ms();
        per_sweep
            .entry((duty, direction))
            .and_modify(|(lo, hi)| {
                *lo = (*lo).min(d);
                *hi = (*hi).max(d);
            })
            .or_insert((d, d));
    }
    let bounds = seen
        .into_keys()
        .map(|duty| {
            let sweeps: Vec<(u32, u32)> = [Direction::Increasing, Direction::Decreasing]
                .iter()
                .filter_map(|dir| per_sweep.get(&(duty, *dir)).copied())
                .collect();
            let range = (!sweeps.is_empty()).then(|| {
                let n = sweeps.len() as f64;
                DurationRange {
                    min_ms: sweeps.iter().map(|s| f64::from(s.0)).sum::<f64>() / n,
                    max_ms: sweeps.iter().map(|s| f64::from(s.1)).sum::<f64>() / n,
                }
            });
            (duty, range)
        })
        .collect();
    AcceptRegion { bounds }
}

/// Five equally spaced durations from `min` to `max`, rounded to the
/// millisecond. A degenerate region yields its single duration.
pub fn plan_round1(min_ms: f64, max_ms: f64) -> Result<Vec<u32>, ProtocolError> {
    if !(min_ms.is_finite() && max_ms.is_finite() && min_ms <= max_ms && min_ms >= 0.0) {
        return Err(ProtocolError::Plan(format!("region ({min_ms}, {max_ms})")));
    }
    let s = (max_ms - min_ms) / 4.0;
    let mut d: Vec<u32> = (0..5).map(|k| (min_ms + s * f64::from(k)).round() as u32).collect();
    d.dedup();
    Ok(d)
}

/// Neighbours of `best` among `tested` (exclusive), infinite when missing.
fn neighbours(best: u32, tested: &[u32]) -> (f64, f64) {
    let below = tested.iter().filter(|&&d| d < best).max().map_or(f64::NEG_INFINITY, |&d| f64::from(d));
    let above = tested.iter().filter(|&&d| d > best).min().map_or(f64::INFINITY, |&d| f64::from(d));
    (below, above)
}

fn between(candidates: impl Iterator<Item = i64>, best: u32, tested: &[u32]) -> Vec<u32> {
    let (lo, hi) = neighbours(best, tested);
    candidates
        .filter(|&d| d >= i64::from(MIN_DURATION_MS) && d <= i64::from(MAX_DURATION_MS))
        .filter(|&d| (d as f64) > lo && (d as f64) < hi)
        .map(|d| d as u32)
        .collect()
}

/// 10 ms grid through `best`, strictly between its round-1 neighbours.
pub fn plan_round2(best: u32, round1: &[u32]) -> Result<Vec<u32>, ProtocolError> {
    if !round1.contains(&best) {
        return Err(ProtocolError::Plan(format!("{best} ms was not tested in round 1")));
    }
    let step = i64::from(SWEEP_STEP_MS);
    let b = i64::from(best);
    let first = b - (b - i64::from(MIN_DURATION_MS)) / step * step;
    Ok(between((first..=i64::from(MAX_DURATION_MS)).step_by(step as usize), best, round1))
}

/// `best2` ± 5 ms, strictly between its neighbours among the durations
/// already tested at this duty.
pub fn plan_round3(best2: u32, tested: &[u32]) -> Vec<u32> {
    let b = i64::from(best2);
    between([b - 5, b, b + 5].into_iter(), best2, tested)
}

/// Duration with the highest mean rating; ties go to the shorter one.
/// Entries are `(duration, rating)` in presentation order.
pub fn best_duration(ratings: &[(u32, u8)]) -> Option<u32> {
    let mut sums: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
    for &(d, r) in ratings {
        let e = sums.entry(d).or_insert((0, 0));
        e.0 += u32::from(r);
        e.1 += 1;
    }
    let mut best: Option<(u32, f64)> = None;
    for (d, (sum, n)) in sums {
        let mean = f64::from(sum) / f64::from(n);
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((d, mean));
        }
    }
    best.map(|(d, _)| d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub duty_pct: u32,
    pub round: u8,
    pub durations: Vec<u32>,
    /// Presentation sequence: each duration three times, shuffled.
    pub order: Vec<u32>,
}

impl RoundPlan {
    fn new(seed: u64, duty_pct: u32, round: u8, durations: Vec<u32>) -> Self {
        let mut order: Vec<u32> = durations
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d, PRESENTATIONS))
            .collect();
        order.shuffle(&mut rng(seed, 16 + u64::from(duty_pct) * 4 + u64::from(round)));
        RoundPlan {
            duty_pct,
            round,
            durations,
            order,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub index: usize,
    pub duplicate: bool,
    pub complete: bool,
}

/// Resumable state of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    seed: u64,
    blocks: Vec<BlockPlan>,
    trials: Vec<TrialRecord>,
    region: Option<AcceptRegion>,
    duty_order: Vec<u32>,
    rounds: Vec<RoundPlan>,
    bests: BTreeMap<u32, u32>,
    complete: bool,
}

impl Experiment {
    pub fn new(seed: u64) -> Self {
        Experiment {
            seed,
            blocks: plan_section1(seed),
            trials: Vec::new(),
            region: None,
            duty_order: Vec::new(),
            rounds: Vec::new(),
            bests: BTreeMap::new(),
            complete: false,
        }
    }

    /// Rebuilds a run from its seed and logged trials.
    pub fn replay(seed: u64, trials: &[TrialRecord]) -> Result<Self, ProtocolError> {
        let mut e = Experiment::new(seed);
        for t in trials {
            e.submit(t.index, t.response, t.timestamp_ms, &t.responder)?;
        }
        Ok(e)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn blocks(&self) -> &[BlockPlan] {
        &self.blocks
    }

    pub fn trials(&self) -> &[TrialRecord] {
        &self.trials
    }

    pub fn region(&self) -> Option<&AcceptRegion> {
        self.region.as_ref()
    }

    pub fn rounds(&self) -> &[RoundPlan] {
        &self.rounds
    }

    /// Final pick per duty, available once that duty's rounds are done.
    pub fn bests(&self) -> &BTreeMap<u32, u32> {
        &self.bests
    }

    pub fn duty_order(&self) -> &[u32] {
        &self.duty_order
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Number of answered trials.
    pub fn cursor(&self) -> usize {
        self.trials.len()
    }

    fn planned_len(&self) -> usize {
        SECTION1_TRIALS + self.rounds.iter().map(|r| r.order.len()).sum::<usize>()
    }

    /// Human-readable description of what the next response must be.
    pub fn phase_descriptor(&self) -> String {
        match self.next_prompt() {
            None => "session complete".into(),
            Some(p) if p.section == 1 => "section1 expects YES/NO + percept".into(),
            Some(p) => format!("section2 round {} expects a 0-7 rating", p.round.unwrap_or(0)),
        }
    }

    pub fn next_prompt(&self) -> Option<Prompt> {
        if self.complete {
            return None;
        }
        let i = self.trials.len();
        if i < SECTION1_TRIALS {
            let block = i / SWEEP_LEVELS;
            let plan = &self.blocks[block];
            let duration = plan.durations[i % SWEEP_LEVELS];
            return Some(Prompt {
                trial_index: i,
                section: 1,
                block: Some(block),
                round: None,
                direction: Some(plan.direction),
                params: stimulus(plan.duty_pct, duration),
                expects: ResponseKind::Judgment,
            });
        }
        let mut j = i - SECTION1_TRIALS;
        for r in &self.rounds {
            if j < r.order.len() {
                return Some(Prompt {
                    trial_index: i,
                    section: 2,
                    block: None,
                    round: Some(r.round),
                    direction: None,
                    params: stimulus(r.duty_pct, r.order[j]),
                    expects: ResponseKind::Rating,
                });
            }
            j -= r.order.len();
        }
        None
    }

    /// Records the response to trial `index`. Re-submitting an identical
    /// response to an earlier trial returns the original acknowledgement.
    pub fn submit(
        &mut self,
        index: usize,
        response: Response,
        timestamp_ms: u64,
        responder: &str,
    ) -> Result<Ack, ProtocolError> {
        if let Some(prev) = self.trials.get(index) {
            return if prev.response == response {
                Ok(Ack {
                    index,
                    duplicate: true,
                    complete: self.complete && index + 1 == self.trials.len(),
                })
            } else {
                Err(ProtocolError::Conflict { index })
            };
        }
        let Some(prompt) = self.next_prompt() else {
            return Err(ProtocolError::Complete);
        };
        if index != prompt.trial_index {
            return Err(ProtocolError::OutOfOrder {
                expected: prompt.trial_index,
                got: index,
            });
        }
        if response.kind() != prompt.expects {
            return Err(ProtocolError::WrongKind {
                phase: if prompt.section == 1 { "section1".into() } else { "section2".into() },
                expected: match prompt.expects {
                    ResponseKind::Judgment => "YES/NO + percept".into(),
                    ResponseKind::Rating => "a 0-7 rating".into(),
                },
            });
        }
        if let Response::Rating { rating } = response {
            if rating > MAX_RATING {
                return Err(ProtocolError::InvalidRating(rating));
            }
        }
        self.trials.push(TrialRecord {
            index,
            section: prompt.section,
            block: prompt.block,
            round: prompt.round,
            direction: prompt.direction,
            params: prompt.params,
            response,
            timestamp_ms,
            responder: responder.to_owned(),
        });
        self.advance()?;
        Ok(Ack {
            index,
            duplicate: false,
            complete: self.complete,
        })
    }

    fn advance(&mut self) -> Result<(), ProtocolError> {
        if self.trials.len() < self.planned_len() {
            return Ok(());
        }
        if self.region.is_none() {
            let region = extract_boundaries(&self.trials);
            let mut duties: Vec<u32> = region.duties().map(|(d, _)| d).collect();
            duties.shuffle(&mut rng(self.seed, 2));
            self.duty_order = duties;
            self.region = Some(region);
            return self.start_next_duty();
        }
        let last = self.rounds.last().cloned().ok_or_else(|| ProtocolError::Plan("no round".into()))?;
        let start = self.planned_len() - last.order.len();
        let ratings: Vec<(u32, u8)> = self.trials[start..]
            .iter()
            .filter_map(|t| match t.response {
                Response::Rating { rating } => Some((t.duration_ms(), rating)),
                Response::Judgment { .. } => None,
            })
            .collect();
        let best = best_duration(&ratings).ok_or_else(|| ProtocolError::Plan("empty round".into()))?;
        let duty = last.duty_pct;
        let next = match last.round {
            1 if last.durations.len() > 1 => Some(plan_round2(best, &last.durations)?),
            2 => {
                let tested: Vec<u32> = self
                    .rounds
                    .iter()
                    .filter(|r| r.duty_pct == duty)
                    .flat_map(|r| r.durations.iter().copied())
                    .collect();
                Some(plan_round3(best, &tested))
            }
            _ => None,
        };
        match next {
            Some(durations) => {
                self.rounds.push(RoundPlan::new(self.seed, duty, last.round + 1, durations));
                Ok(())
            }
            None => {
                self.bests.insert(duty, best);
                self.start_next_duty()
            }
        }
    }

    fn start_next_duty(&mut self) -> Result<(), ProtocolError> {
        let done = self.bests.len();
        let Some(&duty) = self.duty_order.get(done) else {
            self.complete = true;
            return Ok(());
        };
        let range = self
            .region
            .as_ref()
            .and_then(|r| r.get(duty))
            .ok_or_else(|| ProtocolError::Plan(format!("no region at {duty}%")))?;
        let durations = plan_round1(range.min_ms, range.max_ms)?;
        self.rounds.push(RoundPlan::new(self.seed, duty, 1, durations));
        Ok(())
    }
}

fn stimulus(duty_pct: u32, duration_ms: u32) -> StimulusParams {
    StimulusParams::with_default_amplitude(f64::from(duty_pct), f64::from(duration_ms.max(MIN_DURATION_MS)))
        .expect("planned stimuli are always valid")
}

/// Source of responses for [`run_session`].
pub trait Responder {
    fn id(&self) -> String;
    /// `None` aborts the session.
    fn respond(&mut self, prompt: &Prompt) -> Option<Response>;
}

/// Answers prompts from a [`SubjectModel`].
#[derive(Debug, Clone)]
pub struct SubjectResponder {
    pub subject: SubjectModel,
    pub session_key: u64,
}

impl Responder for SubjectResponder {
    fn id(&self) -> String {
        format!("{}{}", crate::session::SIMULATED_PREFIX, self.subject.id)
    }

    fn respond(&mut self, prompt: &Prompt) -> Option<Response> {
        let ctx = TrialContext {
            trial_index: prompt.trial_index as u64,
            direction: prompt.direction,
        };
        Some(match prompt.expects {
            ResponseKind::Judgment => {
                let (acceptable, percept) = self.subject.respond_trial(&prompt.params, ctx, self.session_key);
                Response::Judgment { acceptable, percept }
            }
            ResponseKind::Rating => Response::Rating {
                rating: self.subject.rate_trial(&prompt.params, ctx, self.session_key),
            },
        })
    }
}

/// Fixed per-trial overhead of the simulated clock.
pub const SIMULATED_TRIAL_MS: u64 = 4000;

/// Timestamp of trial `index` on the simulated clock, given the previous one.
pub fn simulated_timestamp(previous_ms: u64, prompt: &Prompt) -> u64 {
    previous_ms + SIMULATED_TRIAL_MS + u64::from(prompt.duration_ms())
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Complete(Experiment),
    /// The responder gave up; the experiment holds everything answered so far.
    Aborted(Experiment),
}

impl RunOutcome {
    pub fn experiment(&self) -> &Experiment {
        match self {
            RunOutcome::Complete(e) | RunOutcome::Aborted(e) => e,
        }
    }

    pub fn into_experiment(self) -> Experiment {
        match self {
            RunOutcome::Complete(e) | RunOutcome::Aborted(e) => e,
        }
    }
}

/// Drives `experiment` to completion with `responder` on the simulated clock.
pub fn continue_session(mut experiment: Experiment, responder: &mut dyn Responder) -> Result<RunOutcome, ProtocolError> {
    let id = responder.id();
    let mut clock = experiment.trials().last().map_or(0, |t| t.timestamp_ms);
    while let Some(prompt) = experiment.next_prompt() {
        let Some(response) = responder.respond(&prompt) else {
            return Ok(RunOutcome::Aborted(experiment));
        };
        clock = simulated_timestamp(clock, &prompt);
        experiment.submit(prompt.trial_index, response, clock, &id)?;
    }
    Ok(RunOutcome::Complete(experiment))
}

pub fn run_session(responder: &mut dyn Responder, seed: u64) -> Result<RunOutcome, ProtocolError> {
    continue_session(Experiment::new(seed), responder)
}
