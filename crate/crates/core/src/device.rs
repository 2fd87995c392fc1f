//! Simulated surface, electrode grid, finger contacts and virtual probes.
//!
//! Lateral force only couples into a finger whose electrode cell is
//! energized (and which is grounded); every other contacting finger sees
//! the commanded force through a constant leak gain. Each finger's
//! lateral motion is a linear mass-spring-damper driven by that force and
//! integrated with semi-implicit Euler at the simulation step.
//!
//! The displacement probe adds the plate's ultrasonic motion to the
//! mechanical response, so one displacement channel carries both the
//! beat-band and the carrier-band content.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{beat_force, DriveConfig, DEFAULT_STEP_S};

/// Vibration detection threshold at 10 Hz (peak displacement).
pub const PERCEPTION_THRESHOLD_UM: f64 = 100.0;
/// Coupling of the commanded force into a finger off the energized cells (−40 dB).
pub const DEFAULT_LEAK_GAIN: f64 = 0.01;
pub const DEFAULT_SENSOR_LAG_S: f64 = 2e-3;
pub const DEFAULT_SENSOR_NOISE_MN: f64 = 0.5;
/// 10 Hz displacement envelope the default fingertip reproduces under the
/// default 250 mN beat force.
pub const TARGET_BEAT_ENVELOPE_UM: f64 = 691.9;
/// Beat-force amplitude used for calibration (half of 500 mN peak-to-peak).
pub const CALIBRATION_FORCE_MN: f64 = 250.0;
pub const CALIBRATION_FREQ_HZ: f64 = 10.0;
/// Plate ultrasonic displacement amplitude seen by a contacting finger.
pub const SURFACE_ULTRASONIC_UM: f64 = 0.021;

const DEFAULT_MASS_KG: f64 = 2.0e-3;
const DEFAULT_DAMPING_NS_PER_M: f64 = 1.0;
/// Output of [`FingerMechanics::calibrate_stiffness`] for the defaults above.
const CALIBRATED_STIFFNESS_N_PER_M: f64 = 363.714_615_361_092_9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("step {got} s does not match the configured {expected} s")]
    StepMismatch { expected: f64, got: f64 },
    #[error("non-finite state for finger {finger} at t = {t_s} s")]
    NonFinite { finger: String, t_s: f64 },
    #[error("unknown finger {0:?}")]
    UnknownFinger(String),
    #[error("cell {index} outside a {n_cols}x{n_rows} grid")]
    CellOutOfRange { index: usize, n_cols: usize, n_rows: usize },
    #[error("trace holds {got} samples, {needed} needed")]
    TraceTooShort { needed: usize, got: usize },
    #[error("invalid press profile: {0}")]
    InvalidProfile(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("calibration did not bracket the target: {0}")]
    Calibration(String),
}

/// Lateral fingertip mechanics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerMechanics {
    pub mass_kg: f64,
    pub stiffness_n_per_m: f64,
    pub damping_ns_per_m: f64,
}

impl Default for FingerMechanics {
    fn default() -> Self {
        FingerMechanics {
            mass_kg: DEFAULT_MASS_KG,
            stiffness_n_per_m: CALIBRATED_STIFFNESS_N_PER_M,
            damping_ns_per_m: DEFAULT_DAMPING_NS_PER_M,
        }
    }
}

impl FingerMechanics {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let ok = [self.mass_kg, self.stiffness_n_per_m, self.damping_ns_per_m]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(DeviceError::InvalidConfig(format!(
                "finger mechanics must be strictly positive: {self:?}"
            )))
        }
    }

    /// Steady-state displacement amplitude (µm) under a sinusoidal force.
    pub fn steady_amplitude_um(&self, force_amplitude_mn: f64, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz;
        let re = self.stiffness_n_per_m - self.mass_kg * w * w;
        let im = self.damping_ns_per_m * w;
        force_amplitude_mn * 1e-3 / re.hypot(im) * 1e6
    }

    /// Bisects the stiffness so that `force_mn` at `freq_hz` produces a
    /// `target_um` amplitude, keeping mass and damping fixed.
    pub fn calibrate_stiffness(
        mass_kg: f64,
        damping_ns_per_m: f64,
        force_mn: f64,
        freq_hz: f64,
        target_um: f64,
    ) -> Result<Self, DeviceError> {
        let at = |k: f64| FingerMechanics {
            mass_kg,
            stiffness_n_per_m: k,
            damping_ns_per_m,
        };
        // amplitude falls monotonically with k above the resonance crossing
        let w = 2.0 * PI * freq_hz;
        let mut lo = mass_kg * w * w;
        let mut hi = lo.max(1.0);
        while at(hi).steady_amplitude_um(force_mn, freq_hz) > target_um {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(DeviceError::Calibration(format!("target {target_um} µm")));
            }
        }
        if at(lo).steady_amplitude_um(force_mn, freq_hz) < target_um {
            return Err(DeviceError::Calibration(format!(
                "damping too high to reach {target_um} µm"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if at(mid).steady_amplitude_um(force_mn, freq_hz) > target_um {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(at(0.5 * (lo + hi)))
    }
}

/// Analytic 10 Hz displacement envelope a stimulus of the given peak-to-peak
/// amplitude produces on an energized finger.
pub fn beat_envelope_um(mech: &FingerMechanics, amplitude_pp_mn: f64) -> f64 {
    mech.steady_amplitude_um(amplitude_pp_mn / 2.0, CALIBRATION_FREQ_HZ)
}

/// Rectangular grid of independently switchable electrode cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeGrid {
    n_cols: usize,
    n_rows: usize,
    cell_size_mm: f64,
    energized: BTreeSet<usize>,
}

impl ElectrodeGrid {
    pub fn new(n_cols: usize, n_rows: usize, cell_size_mm: f64) -> Result<Self, DeviceError> {
        if n_cols == 0 || n_rows == 0 || !(cell_size_mm.is_finite() && cell_size_mm > 0.0) {
            return Err(DeviceError::InvalidConfig(format!(
                "grid {n_cols}x{n_rows} with {cell_size_mm} mm cells"
            )));
        }
        Ok(ElectrodeGrid {
            n_cols,
            n_rows,
            cell_size_mm,
            energized: BTreeSet::new(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cols * self.n_rows
    }

    /// Row-major index of the cell under `(x, y)`; cells are half-open squares.
    pub fn cell_at(&self, x_mm: f64, y_mm: f64) -> Option<usize> {
        if !(x_mm >= 0.0 && y_mm >= 0.0) {
            return None;
        }
        let col = (x_mm / self.cell_size_mm).floor() as usize;
        let row = (y_mm / self.cell_size_mm).floor() as usize;
        (col < self.n_cols && row < self.n_rows).then_some(row * self.n_cols + col)
    }

    pub fn energize(&mut self, index: usize) -> Result<(), DeviceError> {
        self.check(index)?;
        self.energized.insert(index);
        Ok(())
    }

    pub fn deenergize(&mut self, index: usize) -> Result<(), DeviceError> {
        self.check(index)?;
        self.energized.remove(&index);
        Ok(())
    }

    pub fn is_energized(&self, index: usize) -> bool {
        self.energized.contains(&index)
    }

    pub fn energized(&self) -> impl Iterator<Item = usize> + '_ {
        self.energized.iter().copied()
    }

    fn check(&self, index: usize) -> Result<(), DeviceError> {
        if index < self.n_cells() {
            Ok(())
        } else {
            Err(DeviceError::CellOutOfRange {
                index,
                n_cols: self.n_cols,
                n_rows: self.n_rows,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LateralState {
    pub displacement_um: f64,
    pub velocity_um_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finger {
    pub id: String,
    pub position_mm: (f64, f64),
    in_contact: bool,
    normal_force_mn: f64,
    pub grounded: bool,
    pub mech: FingerMechanics,
    pub state: LateralState,
    /// Fraction of the plate's ultrasonic motion transmitted to this finger.
    pub ultrasonic_coupling: f64,
}

impl Finger {
    pub fn new(id: impl Into<String>, position_mm: (f64, f64)) -> Self {
        Finger {
            id: id.into(),
            position_mm,
            in_contact: false,
            normal_force_mn: 0.0,
            grounded: true,
            mech: FingerMechanics::default(),
            state: LateralState::default(),
            ultrasonic_coupling: 1.0,
        }
    }

    pub fn in_contact(&self) -> bool {
        self.in_contact
    }

    pub fn normal_force_mn(&self) -> f64 {
        self.normal_force_mn
    }

    /// Sets the pressing force; zero lifts the finger off the surface.
    pub fn set_normal_force(&mut self, normal_mn: f64) -> Result<(), DeviceError> {
        if !(normal_mn.is_finite() && normal_mn >= 0.0) {
            return Err(DeviceError::InvalidProfile(format!(
                "normal force {normal_mn} mN"
            )));
        }
        self.normal_force_mn = normal_mn;
        self.in_contact = normal_mn > 0.0;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingPath {
    /// Energized cell, electroadhesion on, finger grounded.
    Direct,
    /// Through the surface or the hand at the leak gain.
    Leak,
    /// Finger not touching the surface.
    NoContact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub force_mn: f64,
    pub path: CouplingPath,
}

/// Lateral force actually delivered to `finger` for a commanded force.
pub fn force_on_finger(
    finger: &Finger,
    grid: &ElectrodeGrid,
    cfg: &DriveConfig,
    commanded_mn: f64,
    leak_gain: f64,
) -> Coupling {
    if !finger.in_contact {
        return Coupling {
            force_mn: 0.0,
            path: CouplingPath::NoContact,
        };
    }
    // with electroadhesion off no lateral force is generated at all
    let commanded = if cfg.ea_enabled() { commanded_mn } else { 0.0 };
    let on_energized = grid
        .cell_at(finger.position_mm.0, finger.position_mm.1)
        .is_some_and(|c| grid.is_energized(c));
    if on_energized && finger.grounded && cfg.ea_enabled() {
        Coupling {
            force_mn: commanded,
            path: CouplingPath::Direct,
        }
    } else {
        Coupling {
            force_mn: commanded * leak_gain,
            path: CouplingPath::Leak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    pub step_s: f64,
    pub leak_gain: f64,
    pub sensor_lag_s: f64,
    pub sensor_noise_mn: f64,
    pub surface_ultrasonic_um: f64,
    pub seed: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            step_s: DEFAULT_STEP_S,
            leak_gain: DEFAULT_LEAK_GAIN,
            sensor_lag_s: DEFAULT_SENSOR_LAG_S,
            sensor_noise_mn: DEFAULT_SENSOR_NOISE_MN,
            surface_ultrasonic_um: SURFACE_ULTRASONIC_UM,
            seed: 0,
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.step_s)
            || !positive(self.sensor_lag_s)
            || !non_negative(self.leak_gain)
            || !non_negative(self.sensor_noise_mn)
            || !non_negative(self.surface_ultrasonic_um)
        {
            return Err(DeviceError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorReading {
    pub lateral_mn: f64,
    pub normal_mn: f64,
}

/// Complete simulated device: surface, grid, fingers and the force sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub config: DeviceConfig,
    pub grid: ElectrodeGrid,
    pub drive: DriveConfig,
    fingers: Vec<Finger>,
    time_s: f64,
    step_index: u64,
    sensor_lateral_mn: f64,
    rng: ChaCha8Rng,
    noise_mn: [f64; 2],
}

impl DeviceState {
    pub fn new(
        config: DeviceConfig,
        grid: ElectrodeGrid,
        drive: DriveConfig,
        fingers: Vec<Finger>,
    ) -> Result<Self, DeviceError> {
        config.validate()?;
        let mut seen = BTreeSet::new();
        for f in &fingers {
            f.mech.validate()?;
            if !seen.insert(f.id.as_str()) {
                return Err(DeviceError::InvalidConfig(format!("duplicate finger {:?}", f.id)));
            }
        }
        let mut state = DeviceState {
            config,
            grid,
            drive,
            fingers,
            time_s: 0.0,
            step_index: 0,
            sensor_lateral_mn: 0.0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            noise_mn: [0.0; 2],
        };
        state.draw_noise();
        Ok(state)
    }

    pub fn time_s(&self) -> f64 {
        self.time_s
    }

    pub fn fingers(&self) -> &[Finger] {
        &self.fingers
    }

    pub fn finger(&self, id: &str) -> Result<&Finger, DeviceError> {
        self.fingers
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| DeviceError::UnknownFinger(id.to_owned()))
    }

    pub fn finger_mut(&mut self, id: &str) -> Result<&mut Finger, DeviceError> {
        self.fingers
            .iter_mut()
            .find(|f| f.id == id)
            .ok_or_else(|| DeviceError::UnknownFinger(id.to_owned()))
    }

    pub fn set_normal_force(&mut self, id: &str, normal_mn: f64) -> Result<(), DeviceError> {
        self.finger_mut(id)?.set_normal_force(normal_mn)
    }

    pub fn coupling(&self, finger: &Finger, commanded_mn: f64) -> Coupling {
        force_on_finger(finger, &self.grid, &self.drive, commanded_mn, self.config.leak_gain)
    }

    /// Advances every finger and the sensor by one step under a
    /// commanded force held constant over the step.
    pub fn step(&mut self, dt_s: f64, commanded_mn: f64) -> Result<(), DeviceError> {
        if (dt_s - self.config.step_s).abs() > 1e-12 * self.config.step_s.max(1.0) {
            return Err(DeviceError::StepMismatch {
                expected: self.config.step_s,
                got: dt_s,
            });
        }
        let mut delivered_total = 0.0;
        let couplings: Vec<f64> = self
            .fingers
            .iter()
            .map(|f| self.coupling(f, commanded_mn).force_mn)
            .collect();
        for (finger, force_mn) in self.fingers.iter_mut().zip(couplings) {
            delivered_total += force_mn;
            let m = finger.mech;
            let x = finger.state.displacement_um * 1e-6;
            let v = finger.state.velocity_um_s * 1e-6;
            let a = (force_mn * 1e-3 - m.stiffness_n_per_m * x - m.damping_ns_per_m * v) / m.mass_kg;
            let v = v + dt_s * a;
            let x = x + dt_s * v;
            if !(x.is_finite() && v.is_finite()) {
                return Err(DeviceError::NonFinite {
                    finger: finger.id.clone(),
                    t_s: self.time_s,
                });
            }
            finger.state = LateralState {
                displacement_um: x * 1e6,
                velocity_um_s: v * 1e6,
            };
        }
        let alpha = 1.0 - (-dt_s / self.config.sensor_lag_s).exp();
        self.sensor_lateral_mn += alpha * (delivered_total - self.sensor_lateral_mn);
        self.step_index += 1;
        self.time_s = self.step_index as f64 * self.config.step_s;
        self.draw_noise();
        Ok(())
    }

    /// Six-axis sensor reading: lagged total lateral force and total normal force.
    pub fn virtual_force_sensor(&self) -> SensorReading {
        let normal: f64 = self.fingers.iter().map(|f| f.normal_force_mn).sum();
        SensorReading {
            lateral_mn: self.sensor_lateral_mn + self.noise_mn[0],
            normal_mn: normal + self.noise_mn[1],
        }
    }

    /// Probe reading for one finger: mechanical response plus the plate's
    /// ultrasonic motion when in contact.
    pub fn displacement_probe_um(&self, finger: &Finger) -> f64 {
        let ultrasonic = if finger.in_contact {
            let w = 2.0 * PI * self.drive.piezo_freq_hz();
            finger.ultrasonic_coupling * self.config.surface_ultrasonic_um * (w * self.time_s).sin()
        } else {
            0.0
        };
        finger.state.displacement_um + ultrasonic
    }

    // one draw per step keeps readings a pure function of the state
    fn draw_noise(&mut self) {
        let sigma = self.config.sensor_noise_mn;
        if sigma == 0.0 {
            return;
        }
        for n in &mut self.noise_mn {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *n = z * sigma;
        }
    }

    fn sample_into(&self, trace: &mut Trace) {
        let reading = self.virtual_force_sensor();
        trace.t_s.push(self.time_s);
        trace.lateral_mn.push(reading.lateral_mn);
        trace.normal_mn.push(reading.normal_mn);
        for (ch, f) in trace.displacement_um.iter_mut().zip(&self.fingers) {
            ch.1.push(self.displacement_probe_um(f));
        }
    }

    fn empty_trace(&self) -> Trace {
        Trace {
            sample_period_s: self.config.step_s,
            t_s: Vec::new(),
            lateral_mn: Vec::new(),
            normal_mn: Vec::new(),
            displacement_um: self.fingers.iter().map(|f| (f.id.clone(), Vec::new())).collect(),
        }
    }

    /// Runs for `duration_s` under an open-loop command `command(t_s)`,
    /// recording one sample per step.
    pub fn run(
        &mut self,
        duration_s: f64,
        mut command: impl FnMut(f64) -> f64,
    ) -> Result<Trace, DeviceError> {
        let n = (duration_s / self.config.step_s).round() as usize;
        let mut trace = self.empty_trace();
        for _ in 0..n {
            self.sample_into(&mut trace);
            let u = command(self.time_s);
            self.step(self.config.step_s, u)?;
        }
        Ok(trace)
    }

    /// Drives `finger_id` through a pressing profile while recording.
    /// `controller(t, reading)` returns the lateral command for the next step.
    pub fn apply_press_profile_with(
        &mut self,
        finger_id: &str,
        profile: &PressProfile,
        mut controller: impl FnMut(f64, SensorReading) -> f64,
    ) -> Result<Trace, DeviceError> {
        profile.validate()?;
        self.finger(finger_id)?;
        let t0 = self.time_s;
        let n = (profile.duration_s() / self.config.step_s).round() as usize;
        let mut trace = self.empty_trace();
        for _ in 0..n {
            let normal = profile.normal_at(self.time_s - t0);
            self.set_normal_force(finger_id, normal)?;
            self.sample_into(&mut trace);
            let reading = self.virtual_force_sensor();
            let u = controller(self.time_s, reading);
            self.step(self.config.step_s, u)?;
        }
        Ok(trace)
    }

    /// Press profile with no lateral command.
    pub fn apply_press_profile(
        &mut self,
        finger_id: &str,
        profile: &PressProfile,
    ) -> Result<Trace, DeviceError> {
        self.apply_press_profile_with(finger_id, profile, |_, _| 0.0)
    }
}

/// One press: raised-cosine rise to a plateau, hold, raised-cosine release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Press {
    pub start_s: f64,
    pub rise_s: f64,
    pub hold_s: f64,
    pub fall_s: f64,
    pub plateau_mn: f64,
}

impl Press {
    fn normal_at(&self, t: f64) -> f64 {
        let u = t - self.start_s;
        let ramp = |x: f64| 0.5 * (1.0 - (PI * x).cos());
        if u <= 0.0 {
            0.0
        } else if u < self.rise_s {
            self.plateau_mn * ramp(u / self.rise_s)
        } else if u < self.rise_s + self.hold_s {
            self.plateau_mn
        } else if u < self.rise_s + self.hold_s + self.fall_s {
            self.plateau_mn * ramp(1.0 - (u - self.rise_s - self.hold_s) / self.fall_s)
        } else {
            0.0
        }
    }

    fn end_s(&self) -> f64 {
        self.start_s + self.rise_s + self.hold_s + self.fall_s
    }
}

/// Normal force against time, relative to the start of the profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PressProfile {
    Presses { presses: Vec<Press>, duration_s: f64 },
    /// Linearly interpolated samples.
    Sampled { sample_period_s: f64, normal_mn: Vec<f64> },
}

impl Default for PressProfile {
    /// Press starting at 0.26 s, lasting 0.44 s, with a 900 mN plateau.
    /// The rising edge crosses 600 mN at 0.40 s.
    fn default() -> Self {
        PressProfile::Presses {
            presses: vec![Press {
                start_s: 0.26,
                rise_s: 0.23,
                hold_s: 0.09,
                fall_s: 0.12,
                plateau_mn: 900.0,
            }],
            duration_s: 1.0,
        }
    }
}

impl PressProfile {
    pub fn zero(duration_s: f64) -> Self {
        PressProfile::Presses {
            presses: Vec::new(),
            duration_s,
        }
    }

    pub fn duration_s(&self) -> f64 {
        match self {
            PressProfile::Presses { duration_s, .. } => *duration_s,
            PressProfile::Sampled {
                sample_period_s,
                normal_mn,
            } => sample_period_s * normal_mn.len().saturating_sub(1) as f64,
        }
    }

    pub fn normal_at(&self, t_s: f64) -> f64 {
        match self {
            PressProfile::Presses { presses, .. } => {
                presses.iter().map(|p| p.normal_at(t_s)).fold(0.0, f64::max)
            }
            PressProfile::Sampled {
                sample_period_s,
                normal_mn,
            } => {
                if normal_mn.is_empty() || t_s <= 0.0 {
                    return normal_mn.first().copied().unwrap_or(0.0);
                }
                let pos = t_s / sample_period_s;
                let i = pos.floor() as usize;
                if i + 1 >= normal_mn.len() {
                    return *normal_mn.last().unwrap_or(&0.0);
                }
                let frac = pos - i as f64;
                normal_mn[i] + frac * (normal_mn[i + 1] - normal_mn[i])
            }
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |m: String| Err(DeviceError::InvalidProfile(m));
        match self {
            PressProfile::Presses {
                presses,
                duration_s,
            } => {
                if !(duration_s.is_finite() && *duration_s > 0.0) {
                    return bad(format!("duration {duration_s} s"));
                }
                for p in presses {
                    let times = [p.start_s, p.rise_s, p.hold_s, p.fall_s];
                    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0))
                        || !(p.plateau_mn.is_finite() && p.plateau_mn >= 0.0)
                        || p.rise_s == 0.0
                        || p.fall_s == 0.0
                    {
                        return bad(format!("{p:?}"));
                    }
                    if p.end_s() > *duration_s + 1e-12 {
                        return bad(format!("press ends after the profile: {p:?}"));
                    }
                }
                Ok(())
            }
            PressProfile::Sampled {
                sample_period_s,
                normal_mn,
            } => {
                if !(sample_period_s.is_finite() && *sample_period_s > 0.0) || normal_mn.len() < 2 {
                    return bad("need ≥ 2 samples and a positive period".into());
                }
                if normal_mn.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return bad("negative or non-finite normal force".into());
                }
                Ok(())
            }
        }
    }
}

/// Recorded sensor and probe channels, one sample per simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub sample_period_s: f64,
    pub t_s: Vec<f64>,
    pub lateral_mn: Vec<f64>,
    pub normal_mn: Vec<f64>,
    pub displacement_um: Vec<(String, Vec<f64>)>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.t_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_s.is_empty()
    }

    pub fn displacement(&self, finger_id: &str) -> Result<&[f64], DeviceError> {
        self.displacement_um
            .iter()
            .find(|(id, _)| id == finger_id)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| DeviceError::UnknownFinger(finger_id.to_owned()))
    }

    /// Channel lengths agree and timestamps strictly increase.
    pub fn is_consistent(&self) -> bool {
        let n = self.t_s.len();
        self.lateral_mn.len() == n
            && self.normal_mn.len() == n
            && self.displacement_um.iter().all(|(_, v)| v.len() == n)
            && self.t_s.windows(2).all(|w| w[1] > w[0])
    }

    /// CSV with header `t_s,lateral_mN,normal_mN,disp_um_<finger>...`,
    /// keeping every `decimate`-th sample.
    pub fn write_csv<W: Write>(&self, mut out: W, decimate: usize) -> io::Result<()> {
        let decimate = decimate.max(1);
        write!(out, "t_s,lateral_mN,normal_mN")?;
        for (id, _) in &self.displacement_um {
            write!(out, ",disp_um_{id}")?;
        }
        writeln!(out)?;
        for i in (0..self.len()).step_by(decimate) {
            write!(
                out,
                "{:.6},{:.4},{:.4}",
                self.t_s[i], self.lateral_mn[i], self.normal_mn[i]
            )?;
            for (_, ch) in &self.displacement_um {
                write!(out, ",{:.6}", ch[i])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Mean peak envelope of one finger's displacement in a band around
/// `band_hz`, by quadrature demodulation over consecutive windows.
///
/// Each window spans at least five band periods and at least 100 ms so
/// that the beat band and DC cancel when demodulating carrier-band content.
pub fn displacement_envelope(trace: &Trace, finger_id: &str, band_hz: f64) -> Result<f64, DeviceError> {
    if !(band_hz.is_finite() && band_hz > 0.0) {
        return Err(DeviceError::InvalidConfig(format!("band {band_hz} Hz")));
    }
    let x = trace.displacement(finger_id)?;
    let dt = trace.sample_period_s;
    let window = ((5.0 / band_hz).max(0.1) / dt).round() as usize;
    if x.len() < window {
        return Err(DeviceError::TraceTooShort {
            needed: window,
            got: x.len(),
        });
    }
    let w = 2.0 * PI * band_hz;
    let t0 = trace.t_s.first().copied().unwrap_or(0.0);
    let envelopes: Vec<f64> = x
        .chunks_exact(window)
        .enumerate()
        .map(|(k, chunk)| {
            let (mut i_acc, mut q_acc) = (0.0, 0.0);
            for (j, v) in chunk.iter().enumerate() {
                let t = t0 + (k * window + j) as f64 * dt;
                i_acc += v * (w * t).cos();
                q_acc += v * (w * t).sin();
            }
            2.0 * i_acc.hypot(q_acc) / window as f64
        })
        .collect();
    Ok(envelopes.iter().sum::<f64>() / envelopes.len() as f64)
}

/// Ratio of two amplitudes in decibels.
pub fn amplitude_ratio_db(a: f64, b: f64) -> f64 {
    20.0 * (a / b).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_cols: usize,
    pub n_rows: usize,
    pub cell_size_mm: f64,
    pub energized: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerSpec {
    pub id: String,
    pub position_mm: (f64, f64),
    pub normal_force_mn: f64,
    #[serde(default = "yes")]
    pub grounded: bool,
    #[serde(default)]
    pub mech: FingerMechanics,
    #[serde(default = "unit")]
    pub ultrasonic_coupling: f64,
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Versioned scenario document: grid, finger placements and mechanics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub device: DeviceConfig,
    pub drive: DriveConfig,
    pub grid: GridSpec,
    pub fingers: Vec<FingerSpec>,
}

impl Scenario {
    /// Two grounded fingers: `index` on the energized cell, `middle` on an
    /// isolated one. Carriers detuned by 10 Hz.
    pub fn isolation() -> Self {
        Scenario {
            schema_version: SCENARIO_SCHEMA_VERSION,
            device: DeviceConfig::default(),
            drive: DriveConfig::default(),
            grid: GridSpec {
                n_cols: 2,
                n_rows: 1,
                cell_size_mm: 20.0,
                energized: vec![0],
            },
            fingers: vec![
                FingerSpec {
                    id: "index".into(),
                    position_mm: (10.0, 10.0),
                    normal_force_mn: 500.0,
                    grounded: true,
                    mech: FingerMechanics::default(),
                    ultrasonic_coupling: 1.05,
                },
                FingerSpec {
                    id: "middle".into(),
                    position_mm: (30.0, 10.0),
                    normal_force_mn: 500.0,
                    grounded: true,
                    mech: FingerMechanics::default(),
                    ultrasonic_coupling: 0.95,
                },
            ],
        }
    }

    /// One grounded index finger resting above an energized cell, with
    /// synchronous carriers as used for click rendering.
    pub fn single_finger() -> Self {
        Scenario {
            schema_version: SCENARIO_SCHEMA_VERSION,
            device: DeviceConfig::default(),
            drive: DriveConfig::synchronous(crate::signal::Phase::Deg0),
            grid: GridSpec {
                n_cols: 1,
                n_rows: 1,
                cell_size_mm: 20.0,
                energized: vec![0],
            },
            fingers: vec![FingerSpec {
                id: "index".into(),
                position_mm: (10.0, 10.0),
                normal_force_mn: 0.0,
                grounded: true,
                mech: FingerMechanics::default(),
                ultrasonic_coupling: 1.0,
            }],
        }
    }

    pub fn build(&self) -> Result<DeviceState, DeviceError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(DeviceError::InvalidConfig(format!(
                "scenario schema {} (expected {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut grid = ElectrodeGrid::new(self.grid.n_cols, self.grid.n_rows, self.grid.cell_size_mm)?;
        for &c in &self.grid.energized {
            grid.energize(c)?;
        }
        let fingers = self
            .fingers
            .iter()
            .map(|spec| {
                let mut f = Finger::new(spec.id.clone(), spec.position_mm);
                f.grounded = spec.grounded;
                f.mech = spec.mech;
                f.ultrasonic_coupling = spec.ultrasonic_coupling;
                f.set_normal_force(spec.normal_force_mn)?;
                Ok(f)
            })
            .collect::<Result<Vec<_>, DeviceError>>()?;
        DeviceState::new(self.device, grid, self.drive, fingers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub energized_finger: String,
    pub isolated_finger: String,
    pub energized_beat_um: f64,
    pub isolated_beat_um: f64,
    pub isolation_db: f64,
    pub energized_carrier_um: f64,
    pub isolated_carrier_um: f64,
}

/// Two-finger isolation measurement: settle, then record `measure_s` of
/// the beat-driven response and report both bands for both fingers.
pub fn run_isolation(scenario: &Scenario, settle_s: f64, measure_s: f64) -> Result<IsolationReport, DeviceError> {
    let mut dev = scenario.build()?;
    let on: Vec<&Finger> = dev
        .fingers()
        .iter()
        .filter(|f| dev.coupling(f, 1.0).path == CouplingPath::Direct)
        .collect();
    let off: Vec<&Finger> = dev
        .fingers()
        .iter()
        .filter(|f| dev.coupling(f, 1.0).path == CouplingPath::Leak)
        .collect();
    let (energized, isolated) = match (on.first(), off.first()) {
        (Some(a), Some(b)) => (a.id.clone(), b.id.clone()),
        _ => {
            return Err(DeviceError::InvalidConfig(
                "isolation needs one energized and one isolated finger in contact".into(),
            ))
        }
    };
    let drive = dev.drive;
    dev.run(settle_s, |t| beat_force(&drive, CALIBRATION_FORCE_MN, t))?;
    let trace = dev.run(measure_s, |t| beat_force(&drive, CALIBRATION_FORCE_MN, t))?;
    let beat = crate::signal::beat_frequency(&drive);
    let carrier = drive.piezo_freq_hz();
    let energized_beat_um = displacement_envelope(&trace, &energized, beat)?;
    let isolated_beat_um = displacement_envelope(&trace, &isolated, beat)?;
    Ok(IsolationReport {
        isolation_db: amplitude_ratio_db(energized_beat_um, isolated_beat_um),
        energized_beat_um,
        isolated_beat_um,
        energized_carrier_um: displacement_envelope(&trace, &energized, carrier)?,
        isolated_carrier_um: displacement_envelope(&trace, &isolated, carrier)?,
        energized_finger: energized,
        isolated_finger: isolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_finger(noise: f64) -> DeviceState {
        let mut s = Scenario::single_finger();
        s.device.sensor_noise_mn = noise;
        s.fingers[0].normal_force_mn = 500.0;
        s.build().unwrap()
    }

    #[test]
    fn frozen_stiffness_matches_calibration() {
        let cal = FingerMechanics::calibrate_stiffness(
            DEFAULT_MASS_KG,
            DEFAULT_DAMPING_NS_PER_M,
            CALIBRATION_FORCE_MN,
            CALIBRATION_FREQ_HZ,
            TARGET_BEAT_ENVELOPE_UM,
        )
        .unwrap();
        assert_relative_eq!(
            cal.stiffness_n_per_m,
            CALIBRATED_STIFFNESS_N_PER_M,
            max_relative = 1e-9
        );
        let amp = FingerMechanics::default().steady_amplitude_um(250.0, 10.0);
        assert_relative_eq!(amp, TARGET_BEAT_ENVELOPE_UM, max_relative = 1e-9);
    }

    #[test]
    fn grid_maps_points_to_disjoint_cells() {
        let mut g = ElectrodeGrid::new(3, 2, 10.0).unwrap();
        assert_eq!(g.cell_at(0.0, 0.0), Some(0));
        assert_eq!(g.cell_at(9.999, 0.0), Some(0));
        assert_eq!(g.cell_at(10.0, 0.0), Some(1));
        assert_eq!(g.cell_at(25.0, 15.0), Some(5));
        assert_eq!(g.cell_at(30.0, 0.0), None);
        assert_eq!(g.cell_at(-1.0, 0.0), None);
        assert!(g.energize(6).is_err());
        g.energize(5).unwrap();
        assert!(g.is_energized(5));
        g.deenergize(5).unwrap();
        assert!(!g.is_energized(5));
    }

    #[test]
    fn force_gating_examples() {
        let dev = Scenario::isolation().build().unwrap();
        let index = dev.finger("index").unwrap();
        let middle = dev.finger("middle").unwrap();
        let c = dev.coupling(index, 250.0);
        assert_eq!((c.force_mn, c.path), (250.0, CouplingPath::Direct));
        let c = dev.coupling(middle, 250.0);
        assert_relative_eq!(c.force_mn, 2.5, max_relative = 1e-12);
        assert_eq!(c.path, CouplingPath::Leak);

        let off = dev.drive.with_ea_enabled(false);
        for f in dev.fingers() {
            assert_eq!(force_on_finger(f, &dev.grid, &off, 250.0, DEFAULT_LEAK_GAIN).force_mn, 0.0);
        }

        let mut lifted = index.clone();
        lifted.set_normal_force(0.0).unwrap();
        let c = force_on_finger(&lifted, &dev.grid, &dev.drive, 250.0, DEFAULT_LEAK_GAIN);
        assert_eq!((c.force_mn, c.path), (0.0, CouplingPath::NoContact));

        let mut floating = index.clone();
        floating.grounded = false;
        let c = force_on_finger(&floating, &dev.grid, &dev.drive, 250.0, DEFAULT_LEAK_GAIN);
        assert_eq!(c.path, CouplingPath::Leak);
    }

    #[test]
    fn finger_contact_invariant() {
        let mut f = Finger::new("a", (0.0, 0.0));
        f.set_normal_force(300.0).unwrap();
        assert!(f.in_contact());
        f.set_normal_force(0.0).unwrap();
        assert!(!f.in_contact());
        assert_eq!(f.normal_force_mn(), 0.0);
        assert!(f.set_normal_force(-1.0).is_err());
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let mut dev = one_finger(0.0);
        for _ in 0..1000 {
            dev.step(DEFAULT_STEP_S, 0.0).unwrap();
        }
        assert_eq!(dev.finger("index").unwrap().state, LateralState::default());
    }

    #[test]
    fn step_rejects_wrong_dt() {
        let mut dev = one_finger(0.0);
        assert!(matches!(
            dev.step(1e-4, 0.0),
            Err(DeviceError::StepMismatch { .. })
        ));
    }

    #[test]
    fn step_flags_non_finite_state() {
        let mut dev = one_finger(0.0);
        assert!(matches!(
            dev.step(DEFAULT_STEP_S, f64::INFINITY),
            Err(DeviceError::NonFinite { .. })
        ));
    }

    #[test]
    fn static_gain_is_inverse_stiffness() {
        let mut dev = one_finger(0.0);
        dev.run(1.0, |_| 100.0).unwrap();
        let x = dev.finger("index").unwrap().state.displacement_um;
        let expected = 100e-3 / CALIBRATED_STIFFNESS_N_PER_M * 1e6;
        assert_relative_eq!(x, expected, max_relative = 1e-3);
    }

    #[test]
    fn step_response_matches_analytic_solution() {
        // underdamped m·x'' + b·x' + k·x = F from rest
        let m = FingerMechanics::default();
        let f = 0.2;
        let wn = (m.stiffness_n_per_m / m.mass_kg).sqrt();
        let zeta = m.damping_ns_per_m / (2.0 * (m.stiffness_n_per_m * m.mass_kg).sqrt());
        let wd = wn * (1.0 - zeta * zeta).sqrt();
        let x_static = f / m.stiffness_n_per_m;
        let analytic = |t: f64| {
            x_static * (1.0 - (-zeta * wn * t).exp() * ((wd * t).cos() + zeta * wn / wd * (wd * t).sin()))
        };
        let mut dev = one_finger(0.0);
        let trace = dev.run(0.1, |_| f * 1e3).unwrap();
        let x = trace.displacement("index").unwrap();
        let us = |i: usize| {
            // remove the plate's ultrasonic motion from the probe
            let t = trace.t_s[i];
            SURFACE_ULTRASONIC_UM * (2.0 * PI * dev.drive.piezo_freq_hz() * t).sin()
        };
        let worst = (0..x.len())
            .map(|i| ((x[i] - us(i)) * 1e-6 - analytic(trace.t_s[i])).abs())
            .fold(0.0, f64::max);
        assert!(worst / x_static < 5e-3, "worst relative error {}", worst / x_static);
    }

    #[test]
    fn free_decay_loses_energy() {
        let mut dev = one_finger(0.0);
        dev.finger_mut("index").unwrap().state.displacement_um = 500.0;
        let energy = |d: &DeviceState| {
            let f = d.finger("index").unwrap();
            let x = f.state.displacement_um * 1e-6;
            let v = f.state.velocity_um_s * 1e-6;
            0.5 * f.mech.stiffness_n_per_m * x * x + 0.5 * f.mech.mass_kg * v * v
        };
        let e0 = energy(&dev);
        let mut prev = e0;
        for _ in 0..20 {
            dev.run(0.005, |_| 0.0).unwrap();
            let e = energy(&dev);
            assert!(e <= prev * 1.01, "energy grew from {prev} to {e}");
            prev = e;
        }
        assert!(prev < 0.05 * e0);
    }

    #[test]
    fn sensor_step_reaches_95_percent_in_three_lags() {
        let mut dev = one_finger(0.0);
        let n = (3.0 * DEFAULT_SENSOR_LAG_S / DEFAULT_STEP_S).round() as usize;
        for _ in 0..n {
            dev.step(DEFAULT_STEP_S, 250.0).unwrap();
        }
        assert!(dev.virtual_force_sensor().lateral_mn >= 0.95 * 250.0);
    }

    #[test]
    fn zero_command_reads_noise_floor_only() {
        let mut dev = one_finger(DEFAULT_SENSOR_NOISE_MN);
        let trace = dev.run(0.05, |_| 0.0).unwrap();
        let worst = trace.lateral_mn.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 6.0 * DEFAULT_SENSOR_NOISE_MN, "{worst}");
        let mean = trace.normal_mn.iter().sum::<f64>() / trace.len() as f64;
        assert_relative_eq!(mean, 500.0, max_relative = 1e-3);
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut dev = Scenario::isolation().build().unwrap();
            let drive = dev.drive;
            dev.run(0.05, |t| beat_force(&drive, 250.0, t)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn default_press_profile_shape() {
        let p = PressProfile::default();
        // scan the emitted samples
        let samples: Vec<f64> = (0..100_000).map(|i| p.normal_at(i as f64 * 1e-5)).collect();
        let peak = samples.iter().cloned().fold(0.0, f64::max);
        assert_relative_eq!(peak, 900.0, max_relative = 1e-9);
        let up: Vec<usize> = samples
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] < 600.0 && w[1] >= 600.0)
            .map(|(i, _)| i + 1)
            .collect();
        let down = samples.windows(2).filter(|w| w[0] >= 600.0 && w[1] < 600.0).count();
        assert_eq!(up.len(), 1);
        assert_eq!(down, 1);
        assert!((up[0] as f64 * 1e-5 - 0.40).abs() < 1e-3);
        let pressed: Vec<usize> = (0..samples.len()).filter(|&i| samples[i] > 0.0).collect();
        let span = (pressed[pressed.len() - 1] - pressed[0]) as f64 * 1e-5;
        assert!((span - 0.44).abs() < 1e-3);
        assert!((pressed[0] as f64 * 1e-5 - 0.26).abs() < 1e-4);
    }

    #[test]
    fn press_profile_validation() {
        let bad = PressProfile::Sampled {
            sample_period_s: 0.01,
            normal_mn: vec![0.0, -5.0, 10.0],
        };
        assert!(bad.validate().is_err());
        let mut dev = one_finger(0.0);
        assert!(dev.apply_press_profile("index", &bad).is_err());
        assert!(dev.apply_press_profile("thumb", &PressProfile::default()).is_err());
    }

    #[test]
    fn sampled_profile_interpolates() {
        let p = PressProfile::Sampled {
            sample_period_s: 0.1,
            normal_mn: vec![0.0, 100.0, 300.0],
        };
        assert_relative_eq!(p.normal_at(0.05), 50.0);
        assert_relative_eq!(p.normal_at(0.15), 200.0, max_relative = 1e-12);
        assert_eq!(p.normal_at(5.0), 300.0);
        assert_relative_eq!(p.duration_s(), 0.2);
    }

    #[test]
    fn press_trace_records_normal_force() {
        let mut dev = one_finger(0.0);
        let trace = dev.apply_press_profile("index", &PressProfile::default()).unwrap();
        assert!(trace.is_consistent());
        assert_eq!(trace.len(), 100_000);
        let peak = trace.normal_mn.iter().cloned().fold(0.0, f64::max);
        assert_relative_eq!(peak, 900.0, max_relative = 1e-6);
        assert!(trace.lateral_mn.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn envelope_rejects_short_trace() {
        let mut dev = one_finger(0.0);
        let trace = dev.run(0.2, |_| 0.0).unwrap();
        assert!(matches!(
            displacement_envelope(&trace, "index", 10.0),
            Err(DeviceError::TraceTooShort { .. })
        ));
    }

    #[test]
    fn envelope_of_synthetic_tones() {
        let dt = DEFAULT_STEP_S;
        let n = 100_000;
        let t: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let x: Vec<f64> = t
            .iter()
            .map(|t| 3.0 + 40.0 * (2.0 * PI * 10.0 * t + 0.3).cos() + 0.02 * (2.0 * PI * 30e3 * t).sin())
            .collect();
        let trace = Trace {
            sample_period_s: dt,
            lateral_mn: vec![0.0; n],
            normal_mn: vec![0.0; n],
            displacement_um: vec![("a".into(), x)],
            t_s: t,
        };
        assert_relative_eq!(displacement_envelope(&trace, "a", 10.0).unwrap(), 40.0, max_relative = 1e-6);
        assert_relative_eq!(displacement_envelope(&trace, "a", 30e3).unwrap(), 0.02, max_relative = 1e-6);
    }

    #[test]
    fn isolation_scenario_localizes_beat_force() {
        let report = run_isolation(&Scenario::isolation(), 0.3, 1.0).unwrap();
        assert_relative_eq!(report.energized_beat_um, TARGET_BEAT_ENVELOPE_UM, max_relative = 0.05);
        assert!(report.isolation_db >= 30.0, "{report:?}");
        let carrier_ratio = report.energized_carrier_um / report.isolated_carrier_um;
        assert!((carrier_ratio - 1.0).abs() <= 0.15, "{report:?}");
        assert!(report.energized_beat_um > PERCEPTION_THRESHOLD_UM);
        assert!(report.isolated_beat_um < PERCEPTION_THRESHOLD_UM);
    }

    #[test]
    fn analytic_envelope_helper() {
        let env = beat_envelope_um(&FingerMechanics::default(), 500.0);
        assert_relative_eq!(env, TARGET_BEAT_ENVELOPE_UM, max_relative = 1e-9);
    }

    #[test]
    fn scenario_round_trips_and_checks_version() {
        let s = Scenario::isolation();
        let json = serde_json::to_string_pretty(&s).unwrap();
        let back: Scenario = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let mut wrong = s.clone();
        wrong.schema_version = 99;
        assert!(wrong.build().is_err());
        let mut dup = s;
        dup.fingers[1].id = "index".into();
        assert!(dup.build().is_err());
    }

    #[test]
    fn trace_csv_header() {
        let mut dev = Scenario::isolation().build().unwrap();
        let trace = dev.run(0.001, |_| 0.0).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, 10).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t_s,lateral_mN,normal_mN,disp_um_index,disp_um_middle"));
        assert_eq!(lines.count(), 10);
    }
}
