//! Simulated subjects.
//!
//! A subject reports a stimulus as a single PULSE while its duration stays
//! under a duty-dependent onset, and accepts it as a button click when it
//! is a pulse whose initial width lies in the subject's usable band and
//! whose beat-band displacement is above the vibration threshold. Ratings
//! are a rounded Gaussian bump over the initial width.
//!
//! Two context effects shape section-1 responses. During a sweep the onset
//! is shifted by `sweep_bias_ms` in the sweep direction (the subject keeps
//! giving the previous answer a little too long). A very narrow initial
//! pulse followed by a long negative phase is felt as two events when the
//! negative phase outlasts `fusion_window_ms`.
//!
//! Trial noise is a one-sided lapse (an acceptable click is occasionally
//! rejected) and a ±1 rating slip. Both draw from a generator keyed by the
//! subject seed, the session key and the trial index, so any trial can be
//! re-evaluated in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{beat_envelope_um, FingerMechanics, PERCEPTION_THRESHOLD_UM};
use crate::protocol::Direction;
use crate::signal::StimulusParams;

pub const DEFAULT_JUDGMENT_NOISE: f64 = 0.05;
pub const MAX_RATING: u8 = 7;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid subject {id:?}: {reason}")]
pub struct SubjectError {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Percept {
    Pulse,
    Oscillation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetPoint {
    pub duty_pct: f64,
    pub onset_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectModel {
    pub id: String,
    pub group: u8,
    pub seed: u64,
    /// Narrowest initial pulse the subject feels as a click.
    pub detect_width_ms: f64,
    /// Widest initial pulse still accepted as a click.
    pub max_width_ms: f64,
    /// Pulse/oscillation boundary per duty level, sorted by duty.
    pub osc_onset: Vec<OnsetPoint>,
    #[serde(default)]
    pub sweep_bias_ms: f64,
    #[serde(default)]
    pub fusion_window_ms: Option<f64>,
    pub preferred_width_ms: f64,
    pub rating_tolerance_ms: f64,
    pub rating_peak: f64,
    pub judgment_noise: f64,
}

/// Where a trial sits in a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialContext {
    pub trial_index: u64,
    pub direction: Option<Direction>,
}

impl SubjectModel {
    pub fn validate(&self) -> Result<(), SubjectError> {
        let fail = |reason: String| {
            Err(SubjectError {
                id: self.id.clone(),
                reason,
            })
        };
        if !(1..=3).contains(&self.group) {
            return fail(format!("group {}", self.group));
        }
        if !(self.detect_width_ms > 0.0 && self.max_width_ms >= self.detect_width_ms) {
            return fail("need 0 < detect_width ≤ max_width".into());
        }
        if self.osc_onset.is_empty()
            || self.osc_onset.iter().any(|p| !(p.onset_ms > 0.0 && p.duty_pct > 0.0))
            || self.osc_onset.windows(2).any(|w| w[1].duty_pct <= w[0].duty_pct)
        {
            return fail("onsets must be positive and sorted by strictly increasing duty".into());
        }
        if !(0.0..=f64::from(MAX_RATING)).contains(&self.rating_peak) || self.rating_tolerance_ms <= 0.0 {
            return fail("rating peak in [0, 7] and positive tolerance".into());
        }
        if !(0.0..=1.0).contains(&self.judgment_noise) {
            return fail(format!("noise {}", self.judgment_noise));
        }
        if self.fusion_window_ms.is_some_and(|w| w <= 0.0) || !self.sweep_bias_ms.is_finite() {
            return fail("fusion window must be positive".into());
        }
        Ok(())
    }

    /// Onset interpolated linearly in duty; held constant outside the
    /// calibrated duty range.
    pub fn osc_onset_at(&self, duty_pct: f64) -> f64 {
        let pts = &self.osc_onset;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if duty_pct <= first.duty_pct {
            return first.onset_ms;
        }
        if duty_pct >= last.duty_pct {
            return last.onset_ms;
        }
        let k = pts.windows(2).position(|w| duty_pct <= w[1].duty_pct).unwrap_or(0);
        let (a, b) = (pts[k], pts[k + 1]);
        a.onset_ms + (duty_pct - a.duty_pct) / (b.duty_pct - a.duty_pct) * (b.onset_ms - a.onset_ms)
    }

    fn percept_in(&self, params: &StimulusParams, direction: Option<Direction>) -> Percept {
        let width = params.initial_width_ms();
        let negative = params.duration_ms() - width;
        if width < self.detect_width_ms && self.fusion_window_ms.is_some_and(|w| negative > w) {
            return Percept::Oscillation;
        }
        let shift = match direction {
            Some(Direction::Increasing) => self.sweep_bias_ms,
            Some(Direction::Decreasing) => -self.sweep_bias_ms,
            None => 0.0,
        };
        if params.duration_ms() <= self.osc_onset_at(params.duty_cycle_pct()) + shift {
            Percept::Pulse
        } else {
            Percept::Oscillation
        }
    }

    fn judge_in(&self, params: &StimulusParams, percept: Percept) -> Answer {
        let width = params.initial_width_ms();
        let felt = beat_envelope_um(&FingerMechanics::default(), params.amplitude_pp_mn()) >= PERCEPTION_THRESHOLD_UM;
        if percept == Percept::Pulse && width >= self.detect_width_ms && width <= self.max_width_ms && felt {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    /// Noise-free percept outside any sweep.
    pub fn percept(&self, params: &StimulusParams) -> Percept {
        self.percept_in(params, None)
    }

    /// Noise-free acceptability outside any sweep.
    pub fn judge(&self, params: &StimulusParams) -> Answer {
        self.judge_in(params, self.percept(params))
    }

    /// Noise-free rating; 0 for a rejected stimulus.
    pub fn rate(&self, params: &StimulusParams) -> u8 {
        if self.judge(params) == Answer::No {
            return 0;
        }
        let z = (params.initial_width_ms() - self.preferred_width_ms) / self.rating_tolerance_ms;
        let r = (self.rating_peak * (-0.5 * z * z).exp()).round();
        r.clamp(1.0, f64::from(MAX_RATING)) as u8
    }

    fn trial_rng(&self, session_key: u64, trial_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ session_key.rotate_left(29));
        rng.set_stream(trial_index);
        rng
    }

    /// Section-1 answers for one presentation.
    pub fn respond_trial(&self, params: &StimulusParams, ctx: TrialContext, session_key: u64) -> (Answer, Percept) {
        let percept = self.percept_in(params, ctx.direction);
        let mut answer = self.judge_in(params, percept);
        let mut rng = self.trial_rng(session_key, ctx.trial_index);
        if answer == Answer::Yes && rng.random::<f64>() < self.judgment_noise {
            answer = Answer::No;
        }
        (answer, percept)
    }

    /// Section-2 rating for one presentation.
    pub fn rate_trial(&self, params: &StimulusParams, ctx: TrialContext, session_key: u64) -> u8 {
        let nominal = self.rate(params);
        if nominal == 0 {
            return 0;
        }
        let mut rng = self.trial_rng(session_key, ctx.trial_index);
        let slip = rng.random::<f64>() < self.judgment_noise;
        let up = rng.random::<bool>();
        if !slip {
            nominal
        } else if up {
            (nominal + 1).min(MAX_RATING)
        } else {
            nominal.saturating_sub(1).max(1)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn subject(
    n: u64,
    group: u8,
    detect: f64,
    max_width: f64,
    onsets: [f64; 3],
    bias: f64,
    fusion: Option<f64>,
    preferred: f64,
    tolerance: f64,
) -> SubjectModel {
    SubjectModel {
        id: format!("S{n}"),
        group,
        seed: 0x5eed_0000 + n,
        detect_width_ms: detect,
        max_width_ms: max_width,
        osc_onset: [5.0, 25.0, 50.0]
            .iter()
            .zip(onsets)
            .map(|(&duty_pct, onset_ms)| OnsetPoint { duty_pct, onset_ms })
            .collect(),
        sweep_bias_ms: bias,
        fusion_window_ms: fusion,
        preferred_width_ms: preferred,
        rating_tolerance_ms: tolerance,
        rating_peak: 7.0,
        judgment_noise: DEFAULT_JUDGMENT_NOISE,
    }
}

/// The ten-subject reference roster: six subjects preferring a fixed
/// initial width, three preferring the shortest acceptable clicks and one
/// preferring the longest.
pub fn default_population() -> Vec<SubjectModel> {
    vec![
        subject(1, 1, 3.2, 24.0, [160.0, 75.0, 70.0], 0.0, Some(25.0), 7.0, 3.0),
        subject(2, 1, 3.0, 22.0, [150.0, 70.0, 65.0], 0.0, Some(30.0), 6.5, 3.0),
        subject(3, 1, 3.4, 25.0, [140.0, 52.0, 65.0], 9.5, Some(22.0), 8.0, 3.5),
        subject(4, 1, 3.3, 20.0, [135.0, 80.0, 75.0], 0.0, None, 6.5, 3.0),
        subject(5, 1, 2.9, 30.0, [170.0, 90.0, 72.0], 0.0, Some(18.0), 6.5, 3.0),
        subject(6, 1, 3.1, 26.0, [155.0, 85.0, 68.0], 0.0, None, 9.0, 3.5),
        subject(7, 2, 2.8, 16.0, [150.0, 70.0, 56.0], 0.0, None, 2.5, 5.0),
        subject(8, 2, 3.0, 18.0, [145.0, 65.0, 62.0], 0.0, None, 3.0, 5.0),
        subject(9, 2, 3.5, 17.0, [138.0, 60.0, 66.0], 0.0, None, 2.8, 5.0),
        subject(10, 3, 3.3, 48.0, [205.0, 155.0, 92.0], 0.0, None, 45.0, 25.0),
    ]
}
