//! Drive-signal and lateral-force command synthesis.
//!
//! The lateral force comes from synchronizing the in-plane ultrasonic
//! oscillation of the plate with the electroadhesive normal force. Averaged
//! over a carrier period, the force is proportional to the cosine of the
//! phase between the two carriers: equal frequencies give a steady force
//! whose sign is set by the phase, and detuned carriers give a force that
//! oscillates at the beat frequency.
//!
//! Sign convention: a positive lateral force moves the finger to the left
//! and is produced at 0° phase; a negative force (180°) moves it right.
//!
//! Carriers are handled as analytic envelopes everywhere except
//! [`render_carriers`], which samples both 30 kHz-class carriers for
//! debugging and for cross-checking the analytic envelope.

use std::f64::consts::PI;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default simulation step (10 µs, 100 kHz).
pub const DEFAULT_STEP_S: f64 = 10e-6;
/// Default stimulus amplitude, peak-to-peak.
pub const DEFAULT_AMPLITUDE_PP_MN: f64 = 500.0;
pub const DEFAULT_PIEZO_FREQ_HZ: f64 = 30_000.0;
pub const DEFAULT_EA_FREQ_HZ: f64 = 29_990.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("carrier frequency must be positive and finite, got {0} Hz")]
    InvalidFrequency(f64),
    #[error("phase must be 0 or 180 degrees, got {0}")]
    InvalidPhase(i64),
    #[error("force sign must be +1 or -1, got {0}")]
    InvalidSign(i64),
    #[error("time since trigger must be non-negative, got {0} ms")]
    NegativeTime(f64),
    #[error("invalid stimulus: {0}")]
    InvalidStimulus(String),
    #[error("invalid render request: {0}")]
    InvalidRender(String),
}

/// Electroadhesion phase relative to the ultrasonic oscillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Phase {
    Deg0,
    Deg180,
}

impl Phase {
    pub fn degrees(self) -> i64 {
        match self {
            Phase::Deg0 => 0,
            Phase::Deg180 => 180,
        }
    }

    /// Sign of the lateral force this phase produces.
    pub fn force_sign(self) -> f64 {
        match self {
            Phase::Deg0 => 1.0,
            Phase::Deg180 => -1.0,
        }
    }

    fn radians(self) -> f64 {
        (self.degrees() as f64).to_radians()
    }
}

impl TryFrom<i64> for Phase {
    type Error = SignalError;

    fn try_from(deg: i64) -> Result<Self, Self::Error> {
        match deg {
            0 => Ok(Phase::Deg0),
            180 => Ok(Phase::Deg180),
            other => Err(SignalError::InvalidPhase(other)),
        }
    }
}

impl From<Phase> for i64 {
    fn from(p: Phase) -> i64 {
        p.degrees()
    }
}

/// Carrier configuration of the piezo and electroadhesion drives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDriveConfig")]
pub struct DriveConfig {
    piezo_freq_hz: f64,
    ea_freq_hz: f64,
    phase: Phase,
    ea_enabled: bool,
}

#[derive(Deserialize)]
struct RawDriveConfig {
    piezo_freq_hz: f64,
    ea_freq_hz: f64,
    phase: Phase,
    ea_enabled: bool,
}

impl TryFrom<RawDriveConfig> for DriveConfig {
    type Error = SignalError;

    fn try_from(raw: RawDriveConfig) -> Result<Self, Self::Error> {
        DriveConfig::new(raw.piezo_freq_hz, raw.ea_freq_hz, raw.phase, raw.ea_enabled)
    }
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            piezo_freq_hz: DEFAULT_PIEZO_FREQ_HZ,
            ea_freq_hz: DEFAULT_EA_FREQ_HZ,
            phase: Phase::Deg0,
            ea_enabled: true,
        }
    }
}

impl DriveConfig {
    pub fn new(
        piezo_freq_hz: f64,
        ea_freq_hz: f64,
        phase: Phase,
        ea_enabled: bool,
    ) -> Result<Self, SignalError> {
        for f in [piezo_freq_hz, ea_freq_hz] {
            if !(f.is_finite() && f > 0.0) {
                return Err(SignalError::InvalidFrequency(f));
            }
        }
        Ok(DriveConfig {
            piezo_freq_hz,
            ea_freq_hz,
            phase,
            ea_enabled,
        })
    }

    /// Both carriers at the piezo frequency: a steady force whose sign
    /// follows the phase. This is the drive used while rendering clicks.
    pub fn synchronous(phase: Phase) -> Self {
        DriveConfig {
            piezo_freq_hz: DEFAULT_PIEZO_FREQ_HZ,
            ea_freq_hz: DEFAULT_PIEZO_FREQ_HZ,
            phase,
            ea_enabled: true,
        }
    }

    pub fn piezo_freq_hz(&self) -> f64 {
        self.piezo_freq_hz
    }

    pub fn ea_freq_hz(&self) -> f64 {
        self.ea_freq_hz
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn ea_enabled(&self) -> bool {
        self.ea_enabled
    }

    pub fn with_phase(mut self, phase: Phase) -> Self {
        self.phase = phase;
        self
    }

    pub fn with_ea_enabled(mut self, enabled: bool) -> Self {
        self.ea_enabled = enabled;
        self
    }
}

/// Beat frequency of the two carriers, `|piezo − ea|`.
pub fn beat_frequency(cfg: &DriveConfig) -> f64 {
    (cfg.piezo_freq_hz - cfg.ea_freq_hz).abs()
}

/// Carrier-averaged lateral force at time `t_s` for a drive whose envelope
/// amplitude is `amplitude_mn`. Zero when electroadhesion is disabled.
pub fn beat_force(cfg: &DriveConfig, amplitude_mn: f64, t_s: f64) -> f64 {
    if !cfg.ea_enabled {
        return 0.0;
    }
    let dw = 2.0 * PI * (cfg.piezo_freq_hz - cfg.ea_freq_hz);
    amplitude_mn * (dw * t_s - cfg.phase.radians()).cos()
}

/// One click stimulus: a single cycle of a rectangular lateral force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStimulus")]
pub struct StimulusParams {
    duty_cycle_pct: f64,
    duration_ms: f64,
    amplitude_pp_mn: f64,
}

#[derive(Deserialize)]
struct RawStimulus {
    duty_cycle_pct: f64,
    duration_ms: f64,
    #[serde(default = "default_amplitude")]
    amplitude_pp_mn: f64,
}

fn default_amplitude() -> f64 {
    DEFAULT_AMPLITUDE_PP_MN
}

impl TryFrom<RawStimulus> for StimulusParams {
    type Error = SignalError;

    fn try_from(raw: RawStimulus) -> Result<Self, Self::Error> {
        StimulusParams::new(raw.duty_cycle_pct, raw.duration_ms, raw.amplitude_pp_mn)
    }
}

impl StimulusParams {
    pub fn new(
        duty_cycle_pct: f64,
        duration_ms: f64,
        amplitude_pp_mn: f64,
    ) -> Result<Self, SignalError> {
        if !(duty_cycle_pct.is_finite() && duty_cycle_pct > 0.0 && duty_cycle_pct <= 100.0) {
            return Err(SignalError::InvalidStimulus(format!(
                "duty cycle {duty_cycle_pct}% outside (0, 100]"
            )));
        }
        if !(duration_ms.is_finite() && duration_ms >= 1.0) {
            return Err(SignalError::InvalidStimulus(format!(
                "duration {duration_ms} ms below 1 ms"
            )));
        }
        if !(amplitude_pp_mn.is_finite() && amplitude_pp_mn > 0.0) {
            return Err(SignalError::InvalidStimulus(format!(
                "amplitude {amplitude_pp_mn} mN must be positive"
            )));
        }
        Ok(StimulusParams {
            duty_cycle_pct,
            duration_ms,
            amplitude_pp_mn,
        })
    }

    /// Stimulus at the default 500 mN peak-to-peak amplitude.
    pub fn with_default_amplitude(duty_cycle_pct: f64, duration_ms: f64) -> Result<Self, SignalError> {
        Self::new(duty_cycle_pct, duration_ms, DEFAULT_AMPLITUDE_PP_MN)
    }

    pub fn duty_cycle_pct(&self) -> f64 {
        self.duty_cycle_pct
    }

    pub fn duration_ms(&self) -> f64 {
        self.duration_ms
    }

    pub fn amplitude_pp_mn(&self) -> f64 {
        self.amplitude_pp_mn
    }

    /// Width of the initial positive pulse, `duty × duration`.
    pub fn initial_width_ms(&self) -> f64 {
        self.duty_cycle_pct / 100.0 * self.duration_ms
    }

    pub fn peak_mn(&self) -> f64 {
        self.amplitude_pp_mn / 2.0
    }
}

/// Commanded lateral force `t_ms` after the trigger.
pub fn command_force(params: &StimulusParams, t_ms: f64) -> Result<f64, SignalError> {
    if !(t_ms >= 0.0) {
        return Err(SignalError::NegativeTime(t_ms));
    }
    let peak = params.peak_mn();
    Ok(if t_ms < params.initial_width_ms() {
        peak
    } else if t_ms < params.duration_ms {
        -peak
    } else {
        0.0
    })
}

/// Drive phase that produces a lateral force of the given sign.
pub fn phase_for_force_sign(sign: i64) -> Result<Phase, SignalError> {
    match sign {
        1 => Ok(Phase::Deg0),
        -1 => Ok(Phase::Deg180),
        other => Err(SignalError::InvalidSign(other)),
    }
}

/// Phase driven at `t_ms` after the trigger, or `None` once the stimulus
/// is over and electroadhesion is released.
pub fn scheduled_phase(params: &StimulusParams, t_ms: f64) -> Result<Option<Phase>, SignalError> {
    let f = command_force(params, t_ms)?;
    if f == 0.0 {
        return Ok(None);
    }
    phase_for_force_sign(if f > 0.0 { 1 } else { -1 }).map(Some)
}

/// A uniformly sampled single-channel force waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_period_s: f64,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 * self.sample_period_s
    }

    /// Debug CSV with columns `t_s,force_mN`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t_s,force_mN")?;
        for (i, f) in self.samples.iter().enumerate() {
            writeln!(out, "{:.6},{}", i as f64 * self.sample_period_s, f)?;
        }
        Ok(())
    }

    /// Frequency estimated from sign changes: `crossings / (2 · T)`.
    pub fn zero_crossing_frequency(&self) -> f64 {
        let crossings = zero_crossings(&self.samples);
        crossings as f64 / (2.0 * self.duration_s())
    }
}

/// Number of strict sign changes, skipping exact zeros.
pub fn zero_crossings(samples: &[f64]) -> usize {
    let mut last = 0.0f64;
    let mut count = 0;
    for &s in samples {
        if s == 0.0 {
            continue;
        }
        if last != 0.0 && (s > 0.0) != (last > 0.0) {
            count += 1;
        }
        last = s;
    }
    count
}

/// Samples `command_force` from the trigger to the end of the stimulus.
pub fn sample_command(params: &StimulusParams, step_s: f64) -> Waveform {
    let n = (params.duration_ms / 1000.0 / step_s).ceil() as usize;
    let samples = (0..n)
        .map(|i| command_force(params, i as f64 * step_s * 1000.0).unwrap_or(0.0))
        .collect();
    Waveform {
        sample_period_s: step_s,
        samples,
    }
}

/// Samples the analytic beat force.
pub fn sample_beat_force(cfg: &DriveConfig, amplitude_mn: f64, duration_s: f64, step_s: f64) -> Waveform {
    let n = (duration_s / step_s).round() as usize;
    let samples = (0..n)
        .map(|i| beat_force(cfg, amplitude_mn, i as f64 * step_s))
        .collect();
    Waveform {
        sample_period_s: step_s,
        samples,
    }
}

/// Debug render of the carriers themselves.
///
/// The plate velocity `cos(ωp·t)` and the electroadhesive normal force
/// `N0·(1 + cos(ωe·t + φ))` are sampled at `sample_rate_hz`, multiplied, and
/// averaged over one piezo period. The result is the lateral force actually
/// delivered, scaled so its envelope equals `amplitude_mn`. The sample rate
/// must hold a whole number of samples per piezo period.
pub fn render_carriers(
    cfg: &DriveConfig,
    amplitude_mn: f64,
    duration_s: f64,
    sample_rate_hz: f64,
) -> Result<Waveform, SignalError> {
    let per_period = sample_rate_hz / cfg.piezo_freq_hz;
    let window = per_period.round() as usize;
    if window < 4 || (per_period - window as f64).abs() > 1e-9 {
        return Err(SignalError::InvalidRender(format!(
            "{sample_rate_hz} Hz is not a whole multiple (≥4) of the {} Hz piezo carrier",
            cfg.piezo_freq_hz
        )));
    }
    if !(duration_s > 0.0) {
        return Err(SignalError::InvalidRender(format!("duration {duration_s} s")));
    }
    let dt = 1.0 / sample_rate_hz;
    let n = (duration_s * sample_rate_hz).round() as usize;
    let wp = 2.0 * PI * cfg.piezo_freq_hz;
    let we = 2.0 * PI * cfg.ea_freq_hz;
    let phi = cfg.phase.radians();
    // product averages to (N0/2)·cos(Δω·t − φ); N0 = 2A gives envelope A
    let n0 = if cfg.ea_enabled { 2.0 * amplitude_mn } else { 0.0 };
    let instantaneous = |i: usize| {
        let t = i as f64 * dt;
        let velocity = (wp * t).cos();
        let adhesion = n0 * (1.0 + (we * t - phi).cos());
        velocity * adhesion
    };

    // centred moving average; the first and last half-windows are shortened
    let half = window / 2;
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut ring = std::collections::VecDeque::with_capacity(window);
    for i in 0..n + half {
        if i < n {
            let v = instantaneous(i);
            acc += v;
            ring.push_back(v);
        }
        if ring.len() > window {
            acc -= ring.pop_front().unwrap_or(0.0);
        }
        if i >= half {
            out.push(acc / ring.len() as f64);
        }
    }
    Ok(Waveform {
        sample_period_s: dt,
        samples: out,
    })
}
