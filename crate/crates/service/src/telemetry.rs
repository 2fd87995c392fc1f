//! Device telemetry frames for the live gauge.
//!
//! A press profile is played against the single-finger device with the
//! click engine attached. Frames are taken every `1 / frame_hz` seconds
//! from the full-rate simulation. The LED mirrors `normal_mN ≥ 600` on
//! each frame, and `led_on` / `led_off` mark the frames where it changes.
//! A trigger fires on a full-rate sample and is reported as its own frame
//! (with that sample's time and forces) right after the first lit frame
//! at or after the trigger.

use clicksim_core::click::{ClickEngine, ClickError, DEFAULT_TRIGGER_MN};
use clicksim_core::device::{DeviceError, PressProfile, Scenario};
use clicksim_core::signal::{StimulusParams, DEFAULT_AMPLITUDE_PP_MN};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FRAME_HZ: f64 = 50.0;
pub const LED_THRESHOLD_MN: f64 = DEFAULT_TRIGGER_MN;
const FINGER: &str = "index";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("frame rate must be positive and at most the simulation rate, got {0} Hz")]
    FrameRate(f64),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Click(#[from] ClickError),
    #[error("invalid stimulus: {0}")]
    Stimulus(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub duty_pct: f64,
    pub duration_ms: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude_pp_mn: f64,
}

fn default_amplitude() -> f64 {
    DEFAULT_AMPLITUDE_PP_MN
}

impl Default for StimulusSpec {
    fn default() -> Self {
        StimulusSpec {
            duty_pct: 25.0,
            duration_ms: 160.0,
            amplitude_pp_mn: DEFAULT_AMPLITUDE_PP_MN,
        }
    }
}

impl StimulusSpec {
    pub fn params(&self) -> Result<StimulusParams, TelemetryError> {
        StimulusParams::new(self.duty_pct, self.duration_ms, self.amplitude_pp_mn)
            .map_err(|e| TelemetryError::Stimulus(e.to_string()))
    }
}

/// First message a client sends on the telemetry channel. Every field is
/// optional; `{}` plays the default press with the default stimulus in
/// real time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryRequest {
    pub profile: Option<PressProfile>,
    pub stimulus: Option<StimulusSpec>,
    /// Render the stimulus of this live session's pending trial.
    pub session_id: Option<String>,
    /// Pace frames at `frame_hz`; otherwise send them as fast as possible.
    pub realtime: bool,
    pub frame_hz: f64,
    pub device_seed: u64,
}

impl Default for TelemetryRequest {
    fn default() -> Self {
        TelemetryRequest {
            profile: None,
            stimulus: None,
            session_id: None,
            realtime: true,
            frame_hz: DEFAULT_FRAME_HZ,
            device_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TelemetryEvent {
    LedOn,
    LedOff,
    Trigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Seconds since the start of the profile.
    pub t: f64,
    #[serde(rename = "normal_mN")]
    pub normal_mn: f64,
    #[serde(rename = "lateral_mN")]
    pub lateral_mn: f64,
    pub led: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<TelemetryEvent>,
}

impl Frame {
    pub fn is_trigger(&self) -> bool {
        self.event == Some(TelemetryEvent::Trigger)
    }
}

/// Plays `profile` and returns every frame in transmission order.
pub fn render_frames(
    profile: &PressProfile,
    params: StimulusParams,
    frame_hz: f64,
    device_seed: u64,
) -> Result<Vec<Frame>, TelemetryError> {
    let mut scenario = Scenario::single_finger();
    scenario.device.seed = device_seed;
    let mut device = scenario.build()?;
    let step = device.config.step_s;
    if !(frame_hz.is_finite() && frame_hz > 0.0 && frame_hz <= 1.0 / step) {
        return Err(TelemetryError::FrameRate(frame_hz));
    }
    let every = (1.0 / (frame_hz * step)).round() as u64;
    let mut engine = ClickEngine::new(params, FINGER);
    let mut frames = Vec::new();
    let mut pending = Vec::new();
    let mut led = false;
    let mut sample = 0u64;
    let mut failure = None;
    device.apply_press_profile_with(FINGER, profile, |t, reading| {
        let normal = reading.normal_mn.max(0.0);
        if failure.is_none() {
            match engine.update(normal, t) {
                Ok(Some(_)) => pending.push(Frame {
                    t,
                    normal_mn: normal,
                    lateral_mn: reading.lateral_mn,
                    led: normal >= LED_THRESHOLD_MN,
                    event: Some(TelemetryEvent::Trigger),
                }),
                Ok(None) => {}
                Err(e) => failure = Some(e),
            }
        }
        if sample.is_multiple_of(every) {
            let lit = normal >= LED_THRESHOLD_MN;
            let event = match (led, lit) {
                (false, true) => Some(TelemetryEvent::LedOn),
                (true, false) => Some(TelemetryEvent::LedOff),
                _ => None,
            };
            led = lit;
            frames.push(Frame {
                t,
                normal_mn: normal,
                lateral_mn: reading.lateral_mn,
                led,
                event,
            });
            if led {
                frames.append(&mut pending);
            }
        }
        sample += 1;
        engine.command(t)
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    frames.append(&mut pending);
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clicksim_core::device::Press;

    fn params() -> StimulusParams {
        StimulusSpec::default().params().unwrap()
    }

    fn count(frames: &[Frame], ev: TelemetryEvent) -> usize {
        frames.iter().filter(|f| f.event == Some(ev)).count()
    }

    #[test]
    fn default_press_lights_once_and_triggers_once() {
        let frames = render_frames(&PressProfile::default(), params(), DEFAULT_FRAME_HZ, 0).unwrap();
        let ticks = frames.iter().filter(|f| !f.is_trigger()).count();
        assert_eq!(ticks, 50);
        assert_eq!(count(&frames, TelemetryEvent::LedOn), 1);
        assert_eq!(count(&frames, TelemetryEvent::LedOff), 1);
        assert_eq!(count(&frames, TelemetryEvent::Trigger), 1);
        let on = frames.iter().position(|f| f.event == Some(TelemetryEvent::LedOn)).unwrap();
        let trig = frames.iter().position(Frame::is_trigger).unwrap();
        assert!(trig > on);
        assert!(frames[..on].iter().all(|f| !f.led && f.normal_mn < LED_THRESHOLD_MN));
        assert!(frames[on].normal_mn >= LED_THRESHOLD_MN);
    }

    #[test]
    fn led_mirrors_threshold_on_every_tick() {
        let frames = render_frames(&PressProfile::default(), params(), DEFAULT_FRAME_HZ, 3).unwrap();
        for f in frames.iter().filter(|f| !f.is_trigger()) {
            assert_eq!(f.led, f.normal_mn >= LED_THRESHOLD_MN, "{f:?}");
        }
    }

    #[test]
    fn each_press_gets_one_led_on_and_one_trigger() {
        let press = |start_s| Press {
            start_s,
            rise_s: 0.2,
            hold_s: 0.1,
            fall_s: 0.15,
            plateau_mn: 900.0,
        };
        let profile = PressProfile::Presses {
            presses: vec![press(0.1), press(0.8), press(1.5)],
            duration_s: 2.2,
        };
        let frames = render_frames(&profile, params(), DEFAULT_FRAME_HZ, 1).unwrap();
        assert_eq!(count(&frames, TelemetryEvent::LedOn), 3);
        assert_eq!(count(&frames, TelemetryEvent::Trigger), 3);
        let mut lit = false;
        for f in &frames {
            match f.event {
                Some(TelemetryEvent::LedOn) => lit = true,
                Some(TelemetryEvent::LedOff) => lit = false,
                Some(TelemetryEvent::Trigger) => assert!(lit),
                None => {}
            }
        }
    }

    #[test]
    fn weak_press_never_lights() {
        let profile = PressProfile::Presses {
            presses: vec![Press {
                start_s: 0.1,
                rise_s: 0.2,
                hold_s: 0.2,
                fall_s: 0.2,
                plateau_mn: 500.0,
            }],
            duration_s: 1.0,
        };
        let frames = render_frames(&profile, params(), DEFAULT_FRAME_HZ, 0).unwrap();
        assert!(frames.iter().all(|f| !f.led && f.event.is_none()));
    }

    #[test]
    fn frame_json_uses_wire_names() {
        let f = Frame {
            t: 0.5,
            normal_mn: 612.0,
            lateral_mn: -3.0,
            led: true,
            event: Some(TelemetryEvent::LedOn),
        };
        let v = serde_json::to_value(&f).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"t": 0.5, "normal_mN": 612.0, "lateral_mN": -3.0, "led": true, "event": "led_on"})
        );
        let quiet = Frame { event: None, ..f };
        assert!(serde_json::to_value(&quiet).unwrap().get("event").is_none());
    }

    #[test]
    fn bad_frame_rate_is_rejected() {
        assert!(matches!(
            render_frames(&PressProfile::default(), params(), 0.0, 0),
            Err(TelemetryError::FrameRate(_))
        ));
    }
}
