use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::chain::{comb_beat, AfcSpec, ChainSpec, SourceSpec, Step};
use crate::error::{ConfigIssue, Error, IssueKind, Result};
use crate::lockloop::{
    discriminator_slope, nearest_lock_point, DiscriminatorConfig, Fidelity, LockSetup, ServoConfig,
    ThermalModel,
};
use crate::metrology::integer_ratio;
use crate::noisegen::{
    comb_line_oscillator, laser_from_linewidth, CombModel, NoiseSpec, OscillatorModel,
};

fn default_cap() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub dt_s: f64,
    /// Longest run the time-domain loop is allowed to simulate.
    #[serde(default = "default_cap")]
    pub time_domain_cap_s: f64,
    #[serde(default)]
    pub oscillators: BTreeMap<String, OscillatorDef>,
    #[serde(default)]
    pub locks: BTreeMap<String, LockBlock>,
    pub measurements: Measurements,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainBlock>,
    #[serde(default)]
    pub expectations: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OscillatorDef {
    Oscillator(OscillatorModel),
    Laser(LaserDef),
    Comb(CombModel),
}

/// A laser described by its Lorentzian linewidth plus calibration terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserDef {
    pub nominal_hz: u64,
    pub linewidth_hz: f64,
    /// `h₋₁`, Hz².
    #[serde(default)]
    pub flicker_fm: f64,
    #[serde(default)]
    pub drift_rate: f64,
    #[serde(default)]
    pub drift_random_walk: f64,
}

impl OscillatorDef {
    /// Standalone oscillator model; combs need a line and have none.
    pub fn model(&self) -> Result<OscillatorModel> {
        match self {
            OscillatorDef::Oscillator(m) => {
                m.validate()?;
                Ok(m.clone())
            }
            OscillatorDef::Laser(l) => {
                let mut m = laser_from_linewidth(
                    l.nominal_hz,
                    l.linewidth_hz,
                    l.drift_rate,
                    l.drift_random_walk,
                )?;
                if l.flicker_fm != 0.0 {
                    m.noise = m.noise.with_h(-1, l.flicker_fm);
                    m.validate()?;
                }
                Ok(m)
            }
            OscillatorDef::Comb(_) => Err(Error::Parameter(
                "a comb is only usable through one of its lines".into(),
            )),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            OscillatorDef::Comb(c) => c.validate(),
            _ => self.model().map(|_| ()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityChoice {
    #[default]
    TimeDomain,
    Spectral,
    /// Time domain as the primary result, spectral alongside for comparison.
    Both,
}

impl FidelityChoice {
    pub fn runs(self) -> &'static [Fidelity] {
        match self {
            FidelityChoice::TimeDomain => &[Fidelity::TimeDomain],
            FidelityChoice::Spectral => &[Fidelity::Spectral],
            FidelityChoice::Both => &[Fidelity::TimeDomain, Fidelity::Spectral],
        }
    }

    fn needs_time_domain(self) -> bool {
        self != FidelityChoice::Spectral
    }
}

/// Servo gains given directly or through a target bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoBlock {
    #[serde(default)]
    pub kp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ki: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_hz: Option<f64>,
    pub actuator_limit_hz: f64,
    pub update_dt: f64,
}

impl ServoBlock {
    pub fn resolve(&self, slope_v_per_hz: f64) -> Result<ServoConfig> {
        let s = slope_v_per_hz.abs();
        let ki = match (self.ki, self.bandwidth_hz) {
            (Some(ki), None) => ki,
            (None, Some(bw)) => 2.0 * PI * bw * (1.0 + self.kp * s) / s,
            _ => {
                return Err(Error::Parameter(
                    "servo needs exactly one of ki, bandwidth_hz".into(),
                ))
            }
        };
        let cfg = ServoConfig {
            kp: self.kp,
            ki,
            actuator_limit_hz: self.actuator_limit_hz,
            update_dt: self.update_dt,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockBlock {
    pub laser: String,
    /// An oscillator, or a comb whose line the laser beats against.
    pub reference: String,
    /// Comb line index; the line nearest the laser when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
    /// Detuning added to the laser nominal before acquisition, Hz.
    #[serde(default)]
    pub initial_offset_hz: i64,
    pub discriminator: DiscriminatorConfig,
    pub servo: ServoBlock,
    /// The crossing nearest the nominal beat when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_lock_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal: Option<ThermalModel>,
    #[serde(default)]
    pub fidelity: FidelityChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Measurements {
    pub gate_s: f64,
    #[serde(default)]
    pub dead_time_s: f64,
    /// Octave grid when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taus: Option<Vec<f64>>,
    /// Leading windows for peak-to-peak; the full record is always reported.
    #[serde(default)]
    pub pp_windows_s: Vec<f64>,
    /// Lock name → independent reference for the out-of-loop beat.
    #[serde(default)]
    pub out_of_loop: BTreeMap<String, String>,
    /// Free-running oscillators to count directly.
    #[serde(default)]
    pub oscillators: Vec<String>,
}

/// A chain description whose source instabilities may come from statistics
/// computed earlier in the same run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainBlock {
    pub sources: BTreeMap<String, SourceSpec>,
    pub steps: Vec<Step>,
    pub output: String,
    pub afc: AfcSpec,
    /// Source name → statistic name supplying its `sigma_abs_hz`.
    #[serde(default)]
    pub sigma_from: BTreeMap<String, String>,
}

impl ChainBlock {
    pub fn resolve(&self, stats: &BTreeMap<String, f64>) -> Result<ChainSpec> {
        let mut sources = self.sources.clone();
        for (src, stat) in &self.sigma_from {
            let value = *stats.get(stat).ok_or_else(|| Error::Reference {
                path: format!("chain.sigma_from.{src}"),
                name: stat.clone(),
            })?;
            let s = sources.get_mut(src).ok_or_else(|| Error::Reference {
                path: "chain.sigma_from".into(),
                name: src.clone(),
            })?;
            s.sigma_abs_hz = Some(value);
            s.contributions = None;
            if let Some(tau) = stat_tau(stat) {
                s.tau_s = tau;
            }
        }
        Ok(ChainSpec {
            sources,
            steps: self.steps.clone(),
            output: self.output.clone(),
            afc: self.afc.clone(),
        })
    }
}

/// The `τ` of a statistic named `…@τ`.
pub fn stat_tau(name: &str) -> Option<f64> {
    name.rsplit_once('@').and_then(|(_, t)| t.parse().ok())
}

/// Parses and fully validates a scenario, reporting every problem at once.
pub fn validate_config(raw: &str) -> Result<ScenarioConfig> {
    let de = &mut serde_json::Deserializer::from_str(raw);
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(vec![ConfigIssue {
            path: if path == "." { "$".into() } else { path },
            kind: IssueKind::Structure,
            message: e.inner().to_string(),
        }])
    })?;
    check_config(&cfg)?;
    Ok(cfg)
}

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, path: impl Into<String>, kind: IssueKind, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            path: path.into(),
            kind,
            message: message.into(),
        });
    }

    fn push_err(&mut self, path: impl Into<String>, e: Error) {
        let kind = match &e {
            Error::Timing(_) => IssueKind::Timing,
            Error::Reference { .. } => IssueKind::Reference,
            _ => IssueKind::Value,
        };
        let msg = match e {
            Error::Parameter(m) | Error::Timing(m) => m,
            other => other.to_string(),
        };
        self.push(path, kind, msg);
    }
}

fn is_multiple(a: f64, b: f64) -> bool {
    integer_ratio(a, b).is_some_and(|k| k >= 1)
}

/// Semantic checks on an already-parsed config.
pub fn check_config(cfg: &ScenarioConfig) -> Result<()> {
    let mut is = Issues(Vec::new());
    if cfg.name.is_empty()
        || !cfg
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        || cfg.name.starts_with('.')
    {
        is.push(
            "name",
            IssueKind::Value,
            "name must be a non-empty [A-Za-z0-9._-] string",
        );
    }
    let dt = cfg.dt_s;
    let timing_ok = dt > 0.0 && dt.is_finite();
    if !timing_ok {
        is.push(
            "dt_s",
            IssueKind::Timing,
            format!("dt_s must be positive, got {dt}"),
        );
    } else if !(cfg.duration_s.is_finite() && cfg.duration_s >= 2.0 * dt) {
        is.push(
            "duration_s",
            IssueKind::Timing,
            format!("duration_s must be at least 2·dt_s, got {}", cfg.duration_s),
        );
    }
    if !(cfg.time_domain_cap_s > 0.0) {
        is.push(
            "time_domain_cap_s",
            IssueKind::Timing,
            "cap must be positive",
        );
    }

    for (name, def) in &cfg.oscillators {
        if let Err(e) = def.validate() {
            is.push_err(format!("oscillators.{name}"), e);
        }
    }

    for (name, block) in &cfg.locks {
        let p = format!("locks.{name}");
        let mut refs_ok = true;
        match cfg.oscillators.get(&block.laser) {
            None => {
                refs_ok = false;
                is.push(
                    format!("{p}.laser"),
                    IssueKind::Reference,
                    format!("undefined oscillator \"{}\"", block.laser),
                );
            }
            Some(OscillatorDef::Comb(_)) => {
                refs_ok = false;
                is.push(
                    format!("{p}.laser"),
                    IssueKind::Value,
                    "a comb cannot be the locked laser",
                );
            }
            Some(_) => {}
        }
        match cfg.oscillators.get(&block.reference) {
            None => {
                refs_ok = false;
                is.push(
                    format!("{p}.reference"),
                    IssueKind::Reference,
                    format!("undefined oscillator \"{}\"", block.reference),
                );
            }
            Some(OscillatorDef::Comb(_)) => {}
            Some(_) if block.line.is_some() => {
                is.push(
                    format!("{p}.line"),
                    IssueKind::Value,
                    "line requires a comb reference",
                );
            }
            Some(_) => {}
        }
        if let Err(e) = block.discriminator.validate() {
            is.push_err(format!("{p}.discriminator"), e);
            refs_ok = false;
        }
        if let Some(th) = &block.thermal {
            if let Err(e) = th.validate() {
                is.push_err(format!("{p}.thermal"), e);
            }
        }
        if refs_ok {
            match build_lock_setup(cfg, name) {
                Ok(setup) => check_lock_timing(cfg, &p, block, &setup, &mut is),
                Err(e) => is.push_err(p.clone(), e),
            }
        }
    }

    let m = &cfg.measurements;
    if timing_ok {
        if !is_multiple(m.gate_s, dt) || m.gate_s < 2.0 * dt {
            is.push(
                "measurements.gate_s",
                IssueKind::Timing,
                format!(
                    "gate {} s must be an integer multiple (>= 2) of dt_s",
                    m.gate_s
                ),
            );
        } else if m.gate_s > cfg.duration_s {
            is.push(
                "measurements.gate_s",
                IssueKind::Timing,
                "gate exceeds the run duration",
            );
        }
        if m.dead_time_s != 0.0 && !is_multiple(m.dead_time_s, dt) {
            is.push(
                "measurements.dead_time_s",
                IssueKind::Timing,
                "dead time must be an integer multiple of dt_s",
            );
        }
    }
    if let Some(taus) = &m.taus {
        for (i, t) in taus.iter().enumerate() {
            if !is_multiple(*t, m.gate_s) {
                is.push(
                    format!("measurements.taus[{i}]"),
                    IssueKind::Timing,
                    format!("tau {t} s is not a multiple of the gate"),
                );
            }
            if i > 0 && *t <= taus[i - 1] {
                is.push(
                    format!("measurements.taus[{i}]"),
                    IssueKind::Value,
                    "taus must increase",
                );
            }
        }
    }
    for (i, w) in m.pp_windows_s.iter().enumerate() {
        if !(*w > 0.0 && *w <= cfg.duration_s) {
            is.push(
                format!("measurements.pp_windows_s[{i}]"),
                IssueKind::Value,
                "window must be positive and no longer than the run",
            );
        }
    }
    for (lock, r) in &m.out_of_loop {
        if !cfg.locks.contains_key(lock) {
            is.push(
                format!("measurements.out_of_loop.{lock}"),
                IssueKind::Reference,
                format!("undefined lock \"{lock}\""),
            );
        }
        if !cfg.oscillators.contains_key(r) {
            is.push(
                format!("measurements.out_of_loop.{lock}"),
                IssueKind::Reference,
                format!("undefined oscillator \"{r}\""),
            );
        }
    }
    for (i, o) in m.oscillators.iter().enumerate() {
        match cfg.oscillators.get(o) {
            None => is.push(
                format!("measurements.oscillators[{i}]"),
                IssueKind::Reference,
                format!("undefined oscillator \"{o}\""),
            ),
            Some(OscillatorDef::Comb(_)) => is.push(
                format!("measurements.oscillators[{i}]"),
                IssueKind::Value,
                "a comb cannot be counted without a line",
            ),
            Some(_) => {}
        }
    }

    if let Some(ch) = &cfg.chain {
        check_chain(ch, &mut is);
    }

    for (name, [lo, hi]) in &cfg.expectations {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            is.push(
                format!("expectations.{name}"),
                IssueKind::Value,
                format!("envelope [{lo}, {hi}] must be finite with min <= max"),
            );
        }
    }

    if is.0.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(is.0))
    }
}

fn check_lock_timing(
    cfg: &ScenarioConfig,
    p: &str,
    block: &LockBlock,
    setup: &LockSetup,
    is: &mut Issues,
) {
    let bw = match setup.bandwidth_hz() {
        Ok(bw) => bw,
        Err(e) => return is.push_err(p, e),
    };
    if block.fidelity.needs_time_domain() {
        if cfg.duration_s > cfg.time_domain_cap_s {
            is.push(
                format!("{p}.fidelity"),
                IssueKind::Timing,
                format!(
                    "time-domain runs are capped at {} s; use spectral fidelity for {} s",
                    cfg.time_domain_cap_s, cfg.duration_s
                ),
            );
        }
        if cfg.dt_s > 0.0 && !is_multiple(setup.servo.update_dt, cfg.dt_s) {
            is.push(
                format!("{p}.servo.update_dt"),
                IssueKind::Timing,
                "update_dt must be an integer multiple of dt_s",
            );
        }
        if bw >= 1.0 / (10.0 * setup.servo.update_dt) {
            is.push(
                format!("{p}.servo"),
                IssueKind::Timing,
                format!("bandwidth {bw:.4} Hz must be below 1/(10·update_dt)"),
            );
        }
    }
    if block.fidelity != FidelityChoice::TimeDomain && bw >= 1.0 / (2.0 * cfg.dt_s) {
        is.push(
            format!("{p}.servo"),
            IssueKind::Timing,
            format!("bandwidth {bw:.4} Hz must be below the Nyquist frequency of dt_s"),
        );
    }
}

fn check_chain(ch: &ChainBlock, is: &mut Issues) {
    let mut known: Vec<&str> = ch.sources.keys().map(String::as_str).collect();
    for (i, step) in ch.steps.iter().enumerate() {
        for input in step.inputs() {
            if !known.contains(&input) {
                is.push(
                    format!("chain.steps[{i}]"),
                    IssueKind::Reference,
                    format!("undefined chain node \"{input}\""),
                );
            }
        }
        if known.contains(&step.id()) {
            is.push(
                format!("chain.steps[{i}].id"),
                IssueKind::Value,
                format!("chain node \"{}\" defined twice", step.id()),
            );
        }
        known.push(step.id());
    }
    if !known.contains(&ch.output.as_str()) {
        is.push(
            "chain.output",
            IssueKind::Reference,
            format!("undefined chain node \"{}\"", ch.output),
        );
    }
    for src in ch.sigma_from.keys() {
        if !ch.sources.contains_key(src) {
            is.push(
                format!("chain.sigma_from.{src}"),
                IssueKind::Reference,
                format!("undefined chain source \"{src}\""),
            );
        }
    }
    if let Err(e) = ch.afc.validate() {
        is.push_err("chain.afc", e);
    }
}

/// Resolves a lock block into the models the loop simulation needs.
pub fn build_lock_setup(cfg: &ScenarioConfig, lock: &str) -> Result<LockSetup> {
    let block = cfg.locks.get(lock).ok_or_else(|| Error::Reference {
        path: "locks".into(),
        name: lock.to_string(),
    })?;
    let lookup = |name: &str, field: &str| {
        cfg.oscillators.get(name).ok_or_else(|| Error::Reference {
            path: format!("locks.{lock}.{field}"),
            name: name.to_string(),
        })
    };
    let mut laser = lookup(&block.laser, "laser")?.model()?;
    let reference = match lookup(&block.reference, "reference")? {
        OscillatorDef::Comb(c) => {
            let line = match block.line {
                Some(n) => n,
                None => comb_beat(laser.nominal_hz, c)?.line,
            };
            comb_line_oscillator(c, line)?
        }
        other => other.model()?,
    };
    let beat = laser.nominal_hz.abs_diff(reference.nominal_hz) as f64;
    let f_lock = match block.f_lock_hz {
        Some(f) => f,
        None => nearest_lock_point(&block.discriminator, beat).frequency_hz,
    };
    let shifted = laser.nominal_hz as i128 + block.initial_offset_hz as i128;
    if shifted <= 0 || shifted > u64::MAX as i128 {
        return Err(Error::Parameter(
            "initial offset moves the laser out of range".into(),
        ));
    }
    laser.nominal_hz = shifted as u64;
    let slope = discriminator_slope(&block.discriminator, f_lock)?;
    Ok(LockSetup {
        laser,
        reference,
        discriminator: block.discriminator.clone(),
        servo: block.servo.resolve(slope)?,
        f_lock_hz: f_lock,
        thermal: block.thermal.clone(),
    })
}

/// The oscillator an out-of-loop measurement of `lock` beats against: the
/// oscillator itself, or the comb line nearest the locked laser.
pub fn out_of_loop_reference(
    cfg: &ScenarioConfig,
    lock: &str,
    laser_nominal_hz: u64,
) -> Result<Option<OscillatorModel>> {
    let Some(name) = cfg.measurements.out_of_loop.get(lock) else {
        return Ok(None);
    };
    let def = cfg.oscillators.get(name).ok_or_else(|| Error::Reference {
        path: format!("measurements.out_of_loop.{lock}"),
        name: name.clone(),
    })?;
    Ok(Some(match def {
        OscillatorDef::Comb(c) => comb_line_oscillator(c, comb_beat(laser_nominal_hz, c)?.line)?,
        other => other.model()?,
    }))
}

/// An ideal, noiseless oscillator definition.
pub fn ideal_oscillator(nominal_hz: u64) -> OscillatorDef {
    OscillatorDef::Oscillator(OscillatorModel {
        nominal_hz,
        noise: NoiseSpec::zero(),
        adev_profile: None,
    })
}
