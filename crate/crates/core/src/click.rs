//! Normal-force click trigger.
//!
//! The engine watches the sensed pressing force. Crossing the trigger
//! threshold while armed starts exactly one stimulus; the engine re-arms
//! only once the force has dropped below the release threshold, so a
//! finger resting on the button never fires twice.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceError, DeviceState, PressProfile, Trace};
use crate::signal::{command_force, StimulusParams};

pub const DEFAULT_TRIGGER_MN: f64 = 600.0;
pub const DEFAULT_RELEASE_MN: f64 = 300.0;
/// Below this the finger is treated as lifted.
pub const DEFAULT_CONTACT_MN: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClickError {
    #[error("thresholds must satisfy 0 < contact < release < trigger (got {contact}, {release}, {trigger})")]
    Thresholds { contact: f64, release: f64, trigger: f64 },
    #[error("negative or non-finite normal force {0} mN")]
    InvalidForce(f64),
    #[error("time went backwards: {t_s} s after {last_s} s")]
    TimeReversed { t_s: f64, last_s: f64 },
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Idle,
    Armed,
    Triggered,
    Refractory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub t_s: f64,
    pub params: StimulusParams,
    pub finger_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickEngine {
    mode: Mode,
    trigger_mn: f64,
    release_mn: f64,
    contact_mn: f64,
    params: StimulusParams,
    finger_id: String,
    active_start_s: Option<f64>,
    last_t_s: Option<f64>,
}

impl ClickEngine {
    pub fn new(params: StimulusParams, finger_id: impl Into<String>) -> Self {
        ClickEngine {
            mode: Mode::Idle,
            trigger_mn: DEFAULT_TRIGGER_MN,
            release_mn: DEFAULT_RELEASE_MN,
            contact_mn: DEFAULT_CONTACT_MN,
            params,
            finger_id: finger_id.into(),
            active_start_s: None,
            last_t_s: None,
        }
    }

    pub fn with_thresholds(mut self, contact_mn: f64, release_mn: f64, trigger_mn: f64) -> Result<Self, ClickError> {
        if !(contact_mn > 0.0 && contact_mn < release_mn && release_mn < trigger_mn && trigger_mn.is_finite()) {
            return Err(ClickError::Thresholds {
                contact: contact_mn,
                release: release_mn,
                trigger: trigger_mn,
            });
        }
        self.contact_mn = contact_mn;
        self.release_mn = release_mn;
        self.trigger_mn = trigger_mn;
        Ok(self)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &StimulusParams {
        &self.params
    }

    /// Stimulus used for the next trigger; an active stimulus is unaffected.
    pub fn set_params(&mut self, params: StimulusParams) {
        self.params = params;
    }

    pub fn trigger_mn(&self) -> f64 {
        self.trigger_mn
    }

    /// Start time of the running stimulus, if any.
    pub fn active_since(&self) -> Option<f64> {
        self.active_start_s
    }

    /// Feeds one normal-force sample.
    pub fn update(&mut self, normal_mn: f64, t_s: f64) -> Result<Option<TriggerEvent>, ClickError> {
        if !(normal_mn.is_finite() && normal_mn >= 0.0) {
            return Err(ClickError::InvalidForce(normal_mn));
        }
        if let Some(last) = self.last_t_s {
            if t_s < last {
                return Err(ClickError::TimeReversed { t_s, last_s: last });
            }
        }
        self.last_t_s = Some(t_s);

        if self.mode == Mode::Triggered {
            let start = self.active_start_s.unwrap_or(t_s);
            if (t_s - start) * 1000.0 >= self.params.duration_ms() {
                self.mode = Mode::Refractory;
                self.active_start_s = None;
            }
        }
        if self.mode == Mode::Refractory && normal_mn < self.release_mn {
            self.mode = Mode::Idle;
        }
        if self.mode == Mode::Idle && normal_mn >= self.contact_mn {
            self.mode = Mode::Armed;
        }
        match self.mode {
            Mode::Armed if normal_mn < self.contact_mn => {
                self.mode = Mode::Idle;
                Ok(None)
            }
            Mode::Armed if normal_mn >= self.trigger_mn => {
                self.mode = Mode::Triggered;
                self.active_start_s = Some(t_s);
                Ok(Some(TriggerEvent {
                    t_s,
                    params: self.params,
                    finger_id: self.finger_id.clone(),
                }))
            }
            _ => Ok(None),
        }
    }

    /// Lateral force command at `t_s`: the running stimulus, or zero.
    pub fn command(&self, t_s: f64) -> f64 {
        match self.active_start_s {
            Some(start) if t_s >= start => command_force(&self.params, (t_s - start) * 1000.0).unwrap_or(0.0),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickRender {
    pub trace: Trace,
    pub triggers: Vec<TriggerEvent>,
}

/// Presses `finger_id` through `profile` with the engine wired to the
/// lateral command. Sensor noise is clipped at zero before it reaches
/// the engine.
pub fn render_click(
    device: &mut DeviceState,
    engine: &mut ClickEngine,
    finger_id: &str,
    profile: &PressProfile,
) -> Result<ClickRender, ClickError> {
    let mut triggers = Vec::new();
    let mut failure = None;
    let trace = device.apply_press_profile_with(finger_id, profile, |t, reading| {
        if failure.is_some() {
            return 0.0;
        }
        match engine.update(reading.normal_mn.max(0.0), t) {
            Ok(Some(ev)) => triggers.push(ev),
            Ok(None) => {}
            Err(e) => failure = Some(e),
        }
        engine.command(t)
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(ClickRender { trace, triggers }),
    }
}

/// RMS difference between the measured lateral channel and the command
/// delayed by `lag_s`, over the stimulus window, as a fraction of the
/// peak-to-peak amplitude.
pub fn lagged_rms_error(trace: &Trace, trigger: &TriggerEvent, lag_s: f64) -> f64 {
    let p = &trigger.params;
    let end = trigger.t_s + p.duration_ms() / 1000.0;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, measured) in trace.t_s.iter().zip(&trace.lateral_mn) {
        if *t < trigger.t_s || *t >= end {
            continue;
        }
        let delayed = t - trigger.t_s - lag_s;
        let expected = if delayed < 0.0 {
            0.0
        } else {
            command_force(p, delayed * 1000.0).unwrap_or(0.0)
        };
        sum += (measured - expected).powi(2);
        n += 1;
    }
    if n == 0 {
        return f64::NAN;
    }
    (sum / n as f64).sqrt() / p.amplitude_pp_mn()
}
