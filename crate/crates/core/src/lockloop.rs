//! Delay-line discriminator, PI servo and closed-loop offset-lock simulation.
//!
//! Mixing the beat with a copy delayed by `τ_d` gives an error voltage
//! `sign·V₀·cos(2π f τ_d)`. Its zero crossings at `(2k+1)/(4τ_d)` are the lock
//! points. Around a chosen crossing the servo engages only inside the
//! monotonic range `±1/(4τ_d)` and holds its output outside it.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::exec::Exec;
use crate::metrology::integer_ratio;
use crate::noisegen::{
    add_drift, bin_frequency, noise_spectrum, padded_len, sample_count, spectrum_to_samples,
    NoiseSpec, OscillatorModel,
};
use crate::trace::{derive_seed, FrequencyTrace};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const STREAM_LASER: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_DETECTION: u64 = 3;

/// Signal delay of a coaxial line.
pub fn cable_delay(length_m: f64, velocity_factor: f64) -> Result<f64> {
    if !(velocity_factor > 0.0 && velocity_factor <= 1.0) {
        return param(format!(
            "velocity factor must be in (0, 1], got {velocity_factor}"
        ));
    }
    if !(length_m >= 0.0 && length_m.is_finite()) {
        return param(format!("cable length must be >= 0, got {length_m}"));
    }
    Ok(length_m / (velocity_factor * SPEED_OF_LIGHT))
}

fn default_sign() -> i8 {
    1
}
fn default_bandpass_center() -> f64 {
    30e6
}
fn default_bandpass_halfwidth() -> f64 {
    15e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub delay_s: f64,
    pub amplitude_v: f64,
    #[serde(default = "default_sign")]
    pub sign: i8,
    #[serde(default = "default_bandpass_center")]
    pub bandpass_center_hz: f64,
    #[serde(default = "default_bandpass_halfwidth")]
    pub bandpass_halfwidth_hz: f64,
    /// White detection noise at the error output, V/√Hz (one-sided).
    #[serde(default)]
    pub detection_noise_v_rthz: f64,
}

impl DiscriminatorConfig {
    /// 30 ± 15 MHz brick-wall passband, positive sign, no detection noise.
    pub fn new(delay_s: f64, amplitude_v: f64) -> Result<Self> {
        let d = Self {
            delay_s,
            amplitude_v,
            sign: 1,
            bandpass_center_hz: default_bandpass_center(),
            bandpass_halfwidth_hz: default_bandpass_halfwidth(),
            detection_noise_v_rthz: 0.0,
        };
        d.validate()?;
        Ok(d)
    }

    /// Same as [`new`](Self::new) with an explicit passband, for delays whose
    /// crossings miss the default band.
    pub fn banded(
        delay_s: f64,
        amplitude_v: f64,
        center_hz: f64,
        halfwidth_hz: f64,
    ) -> Result<Self> {
        let d = Self {
            delay_s,
            amplitude_v,
            sign: 1,
            bandpass_center_hz: center_hz,
            bandpass_halfwidth_hz: halfwidth_hz,
            detection_noise_v_rthz: 0.0,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_bandpass(mut self, center_hz: f64, halfwidth_hz: f64) -> Result<Self> {
        self.bandpass_center_hz = center_hz;
        self.bandpass_halfwidth_hz = halfwidth_hz;
        self.validate()?;
        Ok(self)
    }

    pub fn with_sign(mut self, sign: i8) -> Result<Self> {
        self.sign = sign;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delay_s > 0.0 && self.delay_s.is_finite()) {
            return param(format!("delay must be positive, got {}", self.delay_s));
        }
        if !(self.amplitude_v > 0.0 && self.amplitude_v.is_finite()) {
            return param(format!(
                "amplitude must be positive, got {}",
                self.amplitude_v
            ));
        }
        if self.sign != 1 && self.sign != -1 {
            return param(format!("sign must be +1 or -1, got {}", self.sign));
        }
        if !(self.bandpass_halfwidth_hz > 0.0) {
            return param("bandpass half-width must be positive");
        }
        if !(self.detection_noise_v_rthz >= 0.0 && self.detection_noise_v_rthz.is_finite()) {
            return param("detection noise density must be >= 0");
        }
        let (lo, hi) = self.passband();
        if lock_points_raw(self.delay_s, lo, hi).next().is_none() {
            return param(format!(
                "bandpass {lo}..{hi} Hz contains no lock point for delay {} s",
                self.delay_s
            ));
        }
        Ok(())
    }

    pub fn passband(&self) -> (f64, f64) {
        (
            self.bandpass_center_hz - self.bandpass_halfwidth_hz,
            self.bandpass_center_hz + self.bandpass_halfwidth_hz,
        )
    }

    pub fn in_passband(&self, f: f64) -> bool {
        (f - self.bandpass_center_hz).abs() <= self.bandpass_halfwidth_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockPoint {
    pub frequency_hz: f64,
    /// Zero-crossing index `k` in `(2k+1)/(4τ_d)`.
    pub index: u64,
    /// Sign of d(error)/df at this crossing.
    pub slope_sign: i8,
}

fn lock_point_hz(k: i64, delay: f64) -> f64 {
    (2 * k + 1) as f64 / (4.0 * delay)
}

fn parity(k: i64) -> f64 {
    if k.rem_euclid(2) == 0 {
        1.0
    } else {
        -1.0
    }
}

fn lock_points_raw(delay: f64, lo: f64, hi: f64) -> impl Iterator<Item = i64> {
    let k0 = ((4.0 * delay * lo.max(0.0) - 1.0) / 2.0).ceil().max(0.0) as i64;
    (k0..)
        .take_while(move |&k| lock_point_hz(k, delay) <= hi)
        .filter(move |&k| lock_point_hz(k, delay) >= lo)
}

/// Error voltage for a beat at `f_beat`, referenced to crossing `k`:
/// `cos((2k+1)π/2 + x) = −(−1)^k sin x`, which is exactly zero at the crossing.
fn error_at(f_beat: f64, delay: f64, k: i64, disc: &DiscriminatorConfig) -> f64 {
    if !disc.in_passband(f_beat) {
        return 0.0;
    }
    let delta = f_beat - lock_point_hz(k, delay);
    -(disc.sign as f64) * disc.amplitude_v * parity(k) * (2.0 * PI * delta * delay).sin()
}

fn nearest_index(f: f64, delay: f64) -> i64 {
    ((4.0 * f * delay - 1.0) / 2.0).round().max(0.0) as i64
}

/// `sign·V₀·cos(2π f τ_d)` inside the passband, 0 V outside it.
pub fn error_signal(f_beat: f64, disc: &DiscriminatorConfig) -> f64 {
    let k = ((4.0 * f_beat * disc.delay_s - 1.0) / 2.0).round() as i64;
    error_at(f_beat, disc.delay_s, k, disc)
}

/// All zero crossings in `[f_min, f_max]` that are also inside the passband.
pub fn lock_points(disc: &DiscriminatorConfig, f_min: f64, f_max: f64) -> Result<Vec<LockPoint>> {
    if !(f_min < f_max) {
        return param(format!(
            "lock point band requires f_min < f_max, got {f_min}..{f_max}"
        ));
    }
    let (lo, hi) = disc.passband();
    Ok(lock_points_raw(disc.delay_s, f_min.max(lo), f_max.min(hi))
        .map(|k| LockPoint {
            frequency_hz: lock_point_hz(k, disc.delay_s),
            index: k as u64,
            slope_sign: slope_sign(disc, k),
        })
        .collect())
}

fn slope_sign(disc: &DiscriminatorConfig, k: i64) -> i8 {
    if -(disc.sign as f64) * parity(k) > 0.0 {
        1
    } else {
        -1
    }
}

/// The crossing closest to `f_hz`, whether or not it is inside the passband.
pub fn nearest_lock_point(disc: &DiscriminatorConfig, f_hz: f64) -> LockPoint {
    let k = nearest_index(f_hz, disc.delay_s);
    LockPoint {
        frequency_hz: lock_point_hz(k, disc.delay_s),
        index: k as u64,
        slope_sign: slope_sign(disc, k),
    }
}

/// Resolves `f_lock` to the crossing it names, within 0.1% of the capture range.
pub fn resolve_lock_point(disc: &DiscriminatorConfig, f_lock: f64) -> Result<LockPoint> {
    let k = nearest_index(f_lock, disc.delay_s);
    let exact = lock_point_hz(k, disc.delay_s);
    if (f_lock - exact).abs() > 1e-3 * capture_halfwidth(disc) {
        return param(format!(
            "{f_lock} Hz is not a lock point (nearest is {exact} Hz)"
        ));
    }
    Ok(LockPoint {
        frequency_hz: exact,
        index: k as u64,
        slope_sign: slope_sign(disc, k),
    })
}

/// Signed d(error)/df at a lock point; magnitude `2π·V₀·τ_d`.
pub fn discriminator_slope(disc: &DiscriminatorConfig, f_lock: f64) -> Result<f64> {
    let lp = resolve_lock_point(disc, f_lock)?;
    Ok(lp.slope_sign as f64 * 2.0 * PI * disc.amplitude_v * disc.delay_s)
}

/// Half-width of the monotonic region around any lock point, `1/(4τ_d)`.
pub fn capture_halfwidth(disc: &DiscriminatorConfig) -> f64 {
    1.0 / (4.0 * disc.delay_s)
}

/// Temperature excursion of the delay line relative to the start, K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemperatureProfile {
    Constant,
    /// Linear ramp reaching `delta_k` at `over_s`, then holding.
    Ramp {
        delta_k: f64,
        over_s: f64,
    },
    Sinusoid {
        amplitude_k: f64,
        period_s: f64,
    },
    /// Linearly interpolated samples, held beyond the last one.
    Sampled {
        dt_s: f64,
        values_k: Vec<f64>,
    },
}

impl TemperatureProfile {
    pub fn delta_t(&self, t: f64) -> f64 {
        match self {
            TemperatureProfile::Constant => 0.0,
            TemperatureProfile::Ramp { delta_k, over_s } => delta_k * (t / over_s).clamp(0.0, 1.0),
            TemperatureProfile::Sinusoid {
                amplitude_k,
                period_s,
            } => amplitude_k * (2.0 * PI * t / period_s).sin(),
            TemperatureProfile::Sampled { dt_s, values_k } => {
                if values_k.is_empty() {
                    return 0.0;
                }
                let x = (t / dt_s).max(0.0);
                let i = x.floor() as usize;
                if i + 1 >= values_k.len() {
                    return *values_k.last().unwrap();
                }
                let w = x - i as f64;
                values_k[i] * (1.0 - w) + values_k[i + 1] * w
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            TemperatureProfile::Constant => true,
            TemperatureProfile::Ramp { delta_k, over_s } => delta_k.is_finite() && *over_s > 0.0,
            TemperatureProfile::Sinusoid {
                amplitude_k,
                period_s,
            } => amplitude_k.is_finite() && *period_s > 0.0,
            TemperatureProfile::Sampled { dt_s, values_k } => {
                *dt_s > 0.0 && values_k.iter().all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            param("invalid temperature profile")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalModel {
    /// Fractional delay change per kelvin.
    pub tempco_per_k: f64,
    pub profile: TemperatureProfile,
}

impl ThermalModel {
    pub fn new(tempco_per_k: f64, profile: TemperatureProfile) -> Result<Self> {
        let m = Self {
            tempco_per_k,
            profile,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tempco_per_k.abs() < 1e-2) {
            return param(format!(
                "|tempco| must be < 1e-2 /K, got {}",
                self.tempco_per_k
            ));
        }
        self.profile.validate()
    }

    pub fn delay_at(&self, delay0: f64, t: f64) -> f64 {
        delay0 * (1.0 + self.tempco_per_k * self.profile.delta_t(t))
    }
}

/// Instantaneous lock-point frequency `f_lock·τ_d(0)/τ_d(t)`.
pub fn thermal_lockpoint(
    disc: &DiscriminatorConfig,
    thermal: &ThermalModel,
    t: f64,
    f_lock: f64,
) -> f64 {
    f_lock * (disc.delay_s / thermal.delay_at(disc.delay_s, t))
}

/// Lock-point shift from `f_lock` at time `t`, ≈ `−f_lock·tempco·ΔT`.
pub fn thermal_lockpoint_shift(
    disc: &DiscriminatorConfig,
    thermal: &ThermalModel,
    t: f64,
    f_lock: f64,
) -> f64 {
    thermal_lockpoint(disc, thermal, t, f_lock) - f_lock
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoConfig {
    /// Proportional gain, Hz/V.
    pub kp: f64,
    /// Integral gain, Hz/(V·s).
    pub ki: f64,
    pub actuator_limit_hz: f64,
    pub update_dt: f64,
}

impl ServoConfig {
    /// Integral-only servo whose closed loop has bandwidth `bandwidth_hz` on a
    /// discriminator with slope magnitude `slope_v_per_hz`.
    pub fn for_bandwidth(
        bandwidth_hz: f64,
        slope_v_per_hz: f64,
        actuator_limit_hz: f64,
        update_dt: f64,
    ) -> Result<Self> {
        let s = Self {
            kp: 0.0,
            ki: 2.0 * PI * bandwidth_hz / slope_v_per_hz.abs(),
            actuator_limit_hz,
            update_dt,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.actuator_limit_hz > 0.0) {
            return param("actuator limit must be positive");
        }
        if !(self.update_dt > 0.0 && self.update_dt.is_finite()) {
            return Err(Error::Timing(format!(
                "servo update_dt must be positive, got {}",
                self.update_dt
            )));
        }
        if self.kp == 0.0 && self.ki == 0.0 {
            return param("at least one of kp, ki must be nonzero");
        }
        if !(self.kp >= 0.0 && self.ki >= 0.0) {
            return param("servo gains must be >= 0 (polarity comes from the lock point)");
        }
        Ok(())
    }

    /// Closed-loop bandwidth `ki·|s| / (2π(1 + kp·|s|))`, Hz.
    pub fn implied_bandwidth(&self, slope_v_per_hz: f64) -> f64 {
        let s = slope_v_per_hz.abs();
        self.ki * s / (2.0 * PI * (1.0 + self.kp * s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    TimeDomain,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockStatus {
    Locked,
    NeverLocked,
    /// Actuator at its limit for more than half of the run.
    Unstable,
}

/// Everything `simulate_lock` needs besides timing.
///
/// The initial beat is `laser.nominal_hz − reference.nominal_hz`; its distance
/// from `f_lock_hz` is the acquisition offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockSetup {
    pub laser: OscillatorModel,
    pub reference: OscillatorModel,
    pub discriminator: DiscriminatorConfig,
    pub servo: ServoConfig,
    pub f_lock_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal: Option<ThermalModel>,
}

impl LockSetup {
    pub fn beat_nominal(&self) -> i128 {
        self.laser.nominal_hz as i128 - self.reference.nominal_hz as i128
    }

    fn beat_sign(&self) -> f64 {
        if self.beat_nominal() < 0 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn slope(&self) -> Result<f64> {
        discriminator_slope(&self.discriminator, self.f_lock_hz)
    }

    pub fn bandwidth_hz(&self) -> Result<f64> {
        Ok(self.servo.implied_bandwidth(self.slope()?))
    }

    fn lock_point_at(&self, t: f64) -> f64 {
        match &self.thermal {
            Some(th) => thermal_lockpoint(&self.discriminator, th, t, self.f_lock_hz),
            None => self.f_lock_hz,
        }
    }

    fn delay_at(&self, t: f64) -> f64 {
        match &self.thermal {
            Some(th) => th.delay_at(self.discriminator.delay_s, t),
            None => self.discriminator.delay_s,
        }
    }

    fn validate(&self) -> Result<LockPoint> {
        self.laser.validate()?;
        self.reference.validate()?;
        self.discriminator.validate()?;
        self.servo.validate()?;
        if let Some(th) = &self.thermal {
            th.validate()?;
        }
        let lp = resolve_lock_point(&self.discriminator, self.f_lock_hz)?;
        if !self.discriminator.in_passband(self.f_lock_hz) {
            return param(format!(
                "lock point {} Hz is outside the passband",
                self.f_lock_hz
            ));
        }
        Ok(lp)
    }

    fn inloop_nominal(&self) -> u64 {
        self.f_lock_hz.round().max(0.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LockRun {
    pub fidelity: Fidelity,
    pub status: LockStatus,
    /// Locked laser relative to its own nominal.
    pub laser_offset_trace: FrequencyTrace,
    /// Beat magnitude relative to the rounded lock offset.
    pub inloop_beat_trace: FrequencyTrace,
    /// The laser without feedback, relative to its nominal.
    pub free_run_trace: FrequencyTrace,
    pub reference_trace: FrequencyTrace,
    pub error_trace: Vec<f64>,
    pub actuator_trace: Vec<f64>,
    pub lock_flag: Vec<bool>,
    pub thermal_lockpoint_trace: Vec<f64>,
    pub lock_fraction: f64,
    pub rail_fraction: f64,
    pub bandwidth_hz: f64,
}

impl LockRun {
    pub fn dt(&self) -> f64 {
        self.inloop_beat_trace.dt
    }

    /// Free-running beat (laser minus reference line) relative to the rounded
    /// lock offset, as a counter on the beat port would have seen it unlocked.
    pub fn free_run_beat(&self) -> FrequencyTrace {
        let sign = if self.laser_offset_trace.nominal_hz >= self.reference_trace.nominal_hz {
            1.0
        } else {
            -1.0
        };
        let samples = self
            .free_run_trace
            .samples
            .iter()
            .zip(&self.reference_trace.samples)
            .map(|(l, r)| sign * (l - r))
            .collect();
        FrequencyTrace {
            nominal_hz: self
                .laser_offset_trace
                .nominal_hz
                .abs_diff(self.reference_trace.nominal_hz),
            dt: self.dt(),
            samples,
            seed: self.free_run_trace.seed,
        }
    }

    /// Mean absolute beat frequency over the run, Hz.
    pub fn mean_beat_hz(&self) -> f64 {
        let t = &self.inloop_beat_trace;
        t.nominal_hz as f64 + t.samples.iter().sum::<f64>() / t.len() as f64
    }

    pub fn summary(&self, setup: &LockSetup) -> LockRunSummary {
        LockRunSummary {
            fidelity: self.fidelity,
            status: self.status,
            lock_fraction: self.lock_fraction,
            mean_beat_hz: self.mean_beat_hz(),
            rail_fraction: self.rail_fraction,
            bandwidth_hz: self.bandwidth_hz,
            samples: self.inloop_beat_trace.len(),
            dt: self.dt(),
            config: setup.clone(),
        }
    }

    /// Writes the traces as CSVs plus `lockrun.json`; returns the file paths.
    pub fn write_dir(&self, dir: &Path, setup: &LockSetup) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(|source| Error::Output {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut written = Vec::new();
        let seed = self.inloop_beat_trace.seed;
        let aux = |samples: Vec<f64>| FrequencyTrace {
            nominal_hz: 0,
            dt: self.dt(),
            samples,
            seed,
        };
        let lockpoint_nominal = self.inloop_beat_trace.nominal_hz;
        let files: Vec<(&str, FrequencyTrace)> = vec![
            ("laser_offset.csv", self.laser_offset_trace.clone()),
            ("inloop_beat.csv", self.inloop_beat_trace.clone()),
            ("free_run.csv", self.free_run_trace.clone()),
            ("error.csv", aux(self.error_trace.clone())),
            ("actuator.csv", aux(self.actuator_trace.clone())),
            (
                "lock_flag.csv",
                aux(self
                    .lock_flag
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect()),
            ),
            (
                "thermal_lockpoint.csv",
                FrequencyTrace {
                    nominal_hz: lockpoint_nominal,
                    dt: self.dt(),
                    samples: self
                        .thermal_lockpoint_trace
                        .iter()
                        .map(|f| f - lockpoint_nominal as f64)
                        .collect(),
                    seed,
                },
            ),
        ];
        for (name, trace) in files {
            let path = dir.join(name);
            write_file(&path, |w| trace.write_csv(w))?;
            written.push(path);
        }
        let path = dir.join("lockrun.json");
        let json = serde_json::to_string_pretty(&self.summary(setup))?;
        fs::write(&path, json).map_err(|source| Error::Output {
            path: path.clone(),
            source,
        })?;
        written.push(path);
        Ok(written)
    }
}

pub(crate) fn write_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<fs::File>) -> Result<()>,
{
    let file = fs::File::create(path).map_err(|source| Error::Output {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w)?;
    use std::io::Write;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LockRunSummary {
    pub fidelity: Fidelity,
    pub status: LockStatus,
    pub lock_fraction: f64,
    pub mean_beat_hz: f64,
    pub rail_fraction: f64,
    pub bandwidth_hz: f64,
    pub samples: usize,
    pub dt: f64,
    pub config: LockSetup,
}

fn status_of(lock_fraction: f64, rail_fraction: f64) -> LockStatus {
    if rail_fraction > 0.5 {
        LockStatus::Unstable
    } else if lock_fraction == 0.0 {
        LockStatus::NeverLocked
    } else {
        LockStatus::Locked
    }
}

/// Time-stepped closed loop: free-running laser noise plus actuator
/// correction, beat against the reference line, discriminator, PI update every
/// `servo.update_dt`.
pub fn simulate_lock(setup: &LockSetup, duration: f64, dt: f64, seed: u64) -> Result<LockRun> {
    let lp = setup.validate()?;
    let n = sample_count(duration, dt).map_err(|e| Error::Timing(e.to_string()))?;
    let servo = &setup.servo;
    let stride = integer_ratio(servo.update_dt, dt)
        .filter(|&s| s >= 1)
        .ok_or_else(|| {
            Error::Timing(format!(
                "servo update_dt {} s must be a positive integer multiple of dt {dt} s",
                servo.update_dt
            ))
        })?;
    let slope = setup.slope()?;
    let bandwidth = servo.implied_bandwidth(slope);
    if bandwidth >= 1.0 / (10.0 * servo.update_dt) {
        return param(format!(
            "loop bandwidth {bandwidth:.3} Hz must stay below 1/(10·update_dt) = {} Hz",
            1.0 / (10.0 * servo.update_dt)
        ));
    }
    if servo.kp * slope.abs() >= 1.0 {
        return param("kp·|slope| must be < 1 for a stable proportional path");
    }

    let free = setup
        .laser
        .synthesize(duration, dt, derive_seed(seed, STREAM_LASER))?;
    let reference =
        setup
            .reference
            .synthesize(duration, dt, derive_seed(seed, STREAM_REFERENCE))?;
    let detection = detection_trace(setup, duration, dt, seed)?;

    let disc = &setup.discriminator;
    let k_lock = lp.index as i64;
    let polarity = lp.slope_sign as f64 * setup.beat_sign();
    let beat_nominal = setup.beat_nominal() as f64;
    let inloop_nominal = setup.inloop_nominal();
    let limit = servo.actuator_limit_hz;

    let mut laser_out = Vec::with_capacity(n);
    let mut beat_out = Vec::with_capacity(n);
    let mut err_out = Vec::with_capacity(n);
    let mut act_out = Vec::with_capacity(n);
    let mut flag_out = Vec::with_capacity(n);
    let mut lp_out = Vec::with_capacity(n);

    let mut integ = 0.0;
    let mut act = 0.0;
    let mut err = 0.0;
    let mut updates = 0usize;
    let mut railed = 0usize;
    for k in 0..n {
        let t = k as f64 * dt;
        let delay = setup.delay_at(t);
        let lock_hz = setup.lock_point_at(t);
        let laser = free.samples[k] + act;
        let beat = (beat_nominal + laser - reference.samples[k]).abs();
        let captured = (beat - lock_hz).abs() < 1.0 / (4.0 * delay);

        laser_out.push(laser);
        beat_out.push(beat - inloop_nominal as f64);
        act_out.push(act);
        flag_out.push(captured);
        lp_out.push(lock_hz);

        if k % stride == 0 {
            let noise = match &detection {
                Some(d) => {
                    let lo = (k + 1).saturating_sub(stride);
                    d[lo..=k].iter().sum::<f64>() / (k + 1 - lo) as f64
                }
                None => 0.0,
            };
            let shifted = DiscriminatorConfig {
                delay_s: delay,
                ..disc.clone()
            };
            err = error_at_lock(beat, lock_hz, delay, k_lock, &shifted) + noise;
            if captured {
                integ += servo.ki * err * servo.update_dt;
                integ = integ.clamp(-limit, limit);
                act = (-polarity * (servo.kp * err + integ)).clamp(-limit, limit);
            }
            updates += 1;
            if act.abs() >= limit {
                railed += 1;
            }
        }
        err_out.push(err);
    }

    let lock_fraction = flag_out.iter().filter(|&&f| f).count() as f64 / n as f64;
    let rail_fraction = railed as f64 / updates.max(1) as f64;
    Ok(LockRun {
        fidelity: Fidelity::TimeDomain,
        status: status_of(lock_fraction, rail_fraction),
        laser_offset_trace: FrequencyTrace::new(setup.laser.nominal_hz, dt, laser_out, seed)?,
        inloop_beat_trace: FrequencyTrace::new(inloop_nominal, dt, beat_out, seed)?,
        free_run_trace: free,
        reference_trace: reference,
        error_trace: err_out,
        actuator_trace: act_out,
        lock_flag: flag_out,
        thermal_lockpoint_trace: lp_out,
        lock_fraction,
        rail_fraction,
        bandwidth_hz: bandwidth,
    })
}

/// Error voltage with the crossing pinned at the (possibly drifting) lock point.
fn error_at_lock(beat: f64, lock_hz: f64, delay: f64, k: i64, disc: &DiscriminatorConfig) -> f64 {
    if !disc.in_passband(beat) {
        return 0.0;
    }
    let delta = beat - lock_hz;
    -(disc.sign as f64) * disc.amplitude_v * parity(k) * (2.0 * PI * delta * delay).sin()
}

/// Detection noise in volts at `dt`. The spectral model draws the same stream
/// so both fidelities see one realization.
fn detection_trace(
    setup: &LockSetup,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<Option<Vec<f64>>> {
    let d = setup.discriminator.detection_noise_v_rthz;
    if d == 0.0 {
        return Ok(None);
    }
    let spec = NoiseSpec::white(d * d);
    Ok(Some(
        crate::noisegen::synth_power_law(&spec, duration, dt, derive_seed(seed, STREAM_DETECTION))?
            .samples,
    ))
}

/// Single-pole closed-loop responses at signed frequency `f`.
fn loop_filters(f: f64, bandwidth: f64) -> (Complex<f64>, Complex<f64>) {
    let x = Complex::new(0.0, f / bandwidth);
    let lp = Complex::new(1.0, 0.0) / (Complex::new(1.0, 0.0) + x);
    let hp = x / (Complex::new(1.0, 0.0) + x);
    (lp, hp)
}

fn signed_bin_frequency(j: usize, m: usize, dt: f64) -> f64 {
    if j <= m / 2 {
        bin_frequency(j, m, dt)
    } else {
        -bin_frequency(m - j, m, dt)
    }
}

/// Exact discretization of a unity-gain first-order low-pass.
fn one_pole_lowpass(x: &[f64], bandwidth: f64, dt: f64) -> Vec<f64> {
    let a = (-2.0 * PI * bandwidth * dt).exp();
    let mut y = Vec::with_capacity(x.len());
    let mut state = x.first().copied().unwrap_or(0.0);
    for &v in x {
        state = a * state + (1.0 - a) * v;
        y.push(state);
    }
    y
}

struct SpectralParts {
    free: Vec<f64>,
    reference: Vec<f64>,
    locked: Vec<f64>,
    inloop: Vec<f64>,
    /// Low-passed detection noise in Hz at the beat, zero if absent.
    detection: Vec<f64>,
}

/// Closed-loop shaping in the frequency domain: the locked laser is the
/// reference (plus in-band detection noise) low-passed at the loop bandwidth
/// plus the free-running laser high-passed by the complementary response.
fn spectral_parts(
    laser: &NoiseSpec,
    reference: &NoiseSpec,
    detection_h0: f64,
    bandwidth: f64,
    n: usize,
    dt: f64,
    seed: u64,
) -> SpectralParts {
    let m = padded_len(n);
    let filters: Vec<(Complex<f64>, Complex<f64>)> = (0..m)
        .map(|j| loop_filters(signed_bin_frequency(j, m, dt), bandwidth))
        .collect();
    let spectrum = |spec: &NoiseSpec, stream: u64| {
        if spec.is_quiet() {
            vec![Complex::new(0.0, 0.0); m]
        } else {
            noise_spectrum(spec, n, dt, derive_seed(seed, stream))
        }
    };

    let xl = spectrum(laser, STREAM_LASER);
    let mut locked: Vec<Complex<f64>> = xl.iter().zip(&filters).map(|(x, f)| x * f.1).collect();
    let mut inloop = locked.clone();
    let free = spectrum_to_samples(xl, n);

    let xr = spectrum(reference, STREAM_REFERENCE);
    for ((l, i), (x, f)) in locked
        .iter_mut()
        .zip(inloop.iter_mut())
        .zip(xr.iter().zip(&filters))
    {
        *l += x * f.0;
        *i -= x * f.1;
    }
    let reference = spectrum_to_samples(xr, n);

    let detection = if detection_h0 > 0.0 {
        let xd = spectrum(&NoiseSpec::white(detection_h0), STREAM_DETECTION);
        let lp: Vec<Complex<f64>> = xd.iter().zip(&filters).map(|(x, f)| x * f.0).collect();
        spectrum_to_samples(lp, n)
    } else {
        vec![0.0; n]
    };
    SpectralParts {
        free,
        reference,
        locked: spectrum_to_samples(locked, n),
        inloop: spectrum_to_samples(inloop, n),
        detection,
    }
}

/// Locked-laser trace from single-pole closed-loop shaping.
pub fn spectral_lock(
    laser: &OscillatorModel,
    reference: &OscillatorModel,
    loop_bandwidth_hz: f64,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<FrequencyTrace> {
    let n = sample_count(duration, dt)?;
    check_bandwidth(loop_bandwidth_hz, dt)?;
    let ls = laser.effective_noise(n, dt)?;
    let rs = reference.effective_noise(n, dt)?;
    let mut locked = spectral_parts(&ls, &rs, 0.0, loop_bandwidth_hz, n, dt, seed).locked;
    apply_drifts(&mut locked, None, &ls, &rs, loop_bandwidth_hz, dt);
    FrequencyTrace::new(laser.nominal_hz, dt, locked, seed)
}

fn check_bandwidth(bw: f64, dt: f64) -> Result<()> {
    if !(bw > 0.0) {
        return param("loop bandwidth must be positive");
    }
    if bw >= 1.0 / (2.0 * dt) {
        return param(format!(
            "loop bandwidth {bw} Hz must be below the Nyquist frequency {} Hz",
            1.0 / (2.0 * dt)
        ));
    }
    Ok(())
}

/// Adds the deterministic drift ramps through the same loop responses.
fn apply_drifts(
    locked: &mut [f64],
    inloop: Option<&mut [f64]>,
    laser: &NoiseSpec,
    reference: &NoiseSpec,
    bandwidth: f64,
    dt: f64,
) {
    if laser.drift_rate == 0.0 && reference.drift_rate == 0.0 {
        return;
    }
    let n = locked.len();
    let mut lramp = vec![0.0; n];
    add_drift(&mut lramp, laser.drift_rate, dt);
    let mut rramp = vec![0.0; n];
    add_drift(&mut rramp, reference.drift_rate, dt);
    let l_lp = one_pole_lowpass(&lramp, bandwidth, dt);
    let r_lp = one_pole_lowpass(&rramp, bandwidth, dt);
    for k in 0..n {
        locked[k] += (lramp[k] - l_lp[k]) + r_lp[k];
    }
    if let Some(inloop) = inloop {
        for k in 0..n {
            inloop[k] += (lramp[k] - l_lp[k]) - (rramp[k] - r_lp[k]);
        }
    }
}

/// Spectral fast path packaged as a [`LockRun`], with the bandwidth implied by
/// the servo gains, detection noise referred through the discriminator slope,
/// and the lock point following the thermal model.
pub fn spectral_lock_run(setup: &LockSetup, duration: f64, dt: f64, seed: u64) -> Result<LockRun> {
    setup.validate()?;
    let n = sample_count(duration, dt).map_err(|e| Error::Timing(e.to_string()))?;
    let slope = setup.slope()?;
    let bandwidth = setup.servo.implied_bandwidth(slope);
    check_bandwidth(bandwidth, dt)?;

    let ls = setup.laser.effective_noise(n, dt)?;
    let rs = setup.reference.effective_noise(n, dt)?;
    let det = setup.discriminator.detection_noise_v_rthz / slope.abs();
    let SpectralParts {
        mut free,
        mut reference,
        mut locked,
        mut inloop,
        detection,
    } = spectral_parts(&ls, &rs, det * det, bandwidth, n, dt, seed);
    apply_drifts(&mut locked, Some(&mut inloop), &ls, &rs, bandwidth, dt);
    add_drift(&mut free, ls.drift_rate, dt);
    add_drift(&mut reference, rs.drift_rate, dt);

    let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let lock_hz: Vec<f64> = times.iter().map(|&t| setup.lock_point_at(t)).collect();
    let shift: Vec<f64> = lock_hz.iter().map(|f| f - setup.f_lock_hz).collect();
    let shift = one_pole_lowpass(&shift, bandwidth, dt);

    let sign = setup.beat_sign();
    // Static pull from the nominal beat onto the lock point.
    let pull = sign * setup.f_lock_hz - setup.beat_nominal() as f64;
    let inloop_nominal = setup.inloop_nominal() as f64;
    let limit = setup.servo.actuator_limit_hz;

    let mut actuator = Vec::with_capacity(n);
    let mut error = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    let mut beat_out = Vec::with_capacity(n);
    // The loop nulls slope·δ + v, so the beat settles at δ = −v/slope.
    let det_sign = slope.signum();
    for k in 0..n {
        inloop[k] -= det_sign * detection[k];
        locked[k] += pull + sign * (shift[k] - det_sign * detection[k]);
        let beat = setup.f_lock_hz + shift[k] + inloop[k];
        let delta = beat - lock_hz[k];
        actuator.push(locked[k] - free[k]);
        error.push(slope * delta);
        flags.push(delta.abs() < 1.0 / (4.0 * setup.delay_at(times[k])));
        beat_out.push(beat - inloop_nominal);
    }
    let lock_fraction = flags.iter().filter(|&&f| f).count() as f64 / n as f64;
    let rail_fraction = actuator.iter().filter(|a| a.abs() >= limit).count() as f64 / n as f64;
    Ok(LockRun {
        fidelity: Fidelity::Spectral,
        status: status_of(lock_fraction, rail_fraction),
        laser_offset_trace: FrequencyTrace::new(setup.laser.nominal_hz, dt, locked, seed)?,
        inloop_beat_trace: FrequencyTrace::new(setup.inloop_nominal(), dt, beat_out, seed)?,
        free_run_trace: FrequencyTrace::new(setup.laser.nominal_hz, dt, free, seed)?,
        reference_trace: FrequencyTrace::new(setup.reference.nominal_hz, dt, reference, seed)?,
        error_trace: error,
        actuator_trace: actuator,
        lock_flag: flags,
        thermal_lockpoint_trace: lock_hz,
        lock_fraction,
        rail_fraction,
        bandwidth_hz: bandwidth,
    })
}

pub fn run_lock(
    setup: &LockSetup,
    fidelity: Fidelity,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<LockRun> {
    match fidelity {
        Fidelity::TimeDomain => simulate_lock(setup, duration, dt, seed),
        Fidelity::Spectral => spectral_lock_run(setup, duration, dt, seed),
    }
}

/// Beat of a locked laser against an independent reference, rebased to the
/// nominal beat between the two carriers.
pub fn out_of_loop_beat(
    locked: &FrequencyTrace,
    independent_ref: &FrequencyTrace,
) -> Result<FrequencyTrace> {
    if locked.len() != independent_ref.len()
        || (locked.dt - independent_ref.dt).abs() > 1e-12 * locked.dt
    {
        return param("out-of-loop traces must share dt and length");
    }
    let sign = if locked.nominal_hz >= independent_ref.nominal_hz {
        1.0
    } else {
        -1.0
    };
    let samples = locked
        .samples
        .iter()
        .zip(&independent_ref.samples)
        .map(|(l, r)| sign * (l - r))
        .collect();
    FrequencyTrace::new(
        locked.nominal_hz.abs_diff(independent_ref.nominal_hz),
        locked.dt,
        samples,
        derive_seed(locked.seed, independent_ref.seed),
    )
}

/// Noiseless acquisition from each initial beat offset (Hz from the lock
/// point); `true` where the loop ends within 1 Hz of the lock point.
pub fn basin_scan(
    setup: &LockSetup,
    offsets_hz: &[i64],
    duration: f64,
    dt: f64,
    exec: Exec,
) -> Result<Vec<bool>> {
    let base = setup.reference.nominal_hz as i128 + setup.f_lock_hz.round() as i128;
    let results = exec.map_slice(offsets_hz, |&off| -> Result<bool> {
        let mut s = setup.clone();
        s.laser = OscillatorModel::ideal((base + off as i128) as u64)?;
        s.reference = OscillatorModel::ideal(setup.reference.nominal_hz)?;
        s.thermal = None;
        s.discriminator.detection_noise_v_rthz = 0.0;
        let run = simulate_lock(&s, duration, dt, 0)?;
        let last = *run.inloop_beat_trace.samples.last().unwrap()
            + run.inloop_beat_trace.nominal_hz as f64;
        Ok((last - s.f_lock_hz).abs() < 1.0 && *run.lock_flag.last().unwrap())
    });
    results.into_iter().collect()
}
