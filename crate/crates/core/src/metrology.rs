//! Gated Π-type counter emulation and Allan-deviation statistics.

use std::io::{BufRead, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::exec::Exec;
use crate::trace::{fmt_float, header_f64, header_u64, parse_header, parse_values, FrequencyTrace};

/// Block length at and below which window sums are evaluated term by term.
/// Longer windows use a running sum re-seeded every `RESYNC` steps.
const LITERAL_WINDOW: usize = 32;
const RESYNC: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CounterMode {
    /// Unweighted mean over each gate.
    #[default]
    Pi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterConfig {
    pub gate_s: f64,
    #[serde(default)]
    pub dead_time_s: f64,
    #[serde(default)]
    pub mode: CounterMode,
}

impl CounterConfig {
    pub fn new(gate_s: f64) -> Self {
        Self {
            gate_s,
            dead_time_s: 0.0,
            mode: CounterMode::Pi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gate_s > 0.0 && self.gate_s.is_finite()) {
            return param(format!("gate_s must be positive, got {}", self.gate_s));
        }
        if !(self.dead_time_s >= 0.0 && self.dead_time_s.is_finite()) {
            return param(format!(
                "dead_time_s must be >= 0, got {}",
                self.dead_time_s
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterSeries {
    pub nominal_hz: u64,
    pub gate_s: f64,
    pub readings: Vec<f64>,
}

impl CounterSeries {
    pub fn new(nominal_hz: u64, gate_s: f64, readings: Vec<f64>) -> Result<Self> {
        if !(gate_s > 0.0 && gate_s.is_finite()) {
            return param(format!("gate_s must be positive, got {gate_s}"));
        }
        if readings.is_empty() {
            return param("counter series needs at least one reading");
        }
        Ok(Self {
            nominal_hz,
            gate_s,
            readings,
        })
    }

    pub fn span(&self) -> f64 {
        self.readings.len() as f64 * self.gate_s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# nominal_hz={} gate_s={}",
            self.nominal_hz,
            fmt_float(self.gate_s)
        )?;
        for r in &self.readings {
            writeln!(w, "{}", fmt_float(*r))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty counter file".into()))??;
        let fields = parse_header(&header)?;
        let nominal_hz = header_u64(&fields, "nominal_hz")?;
        let gate_s = header_f64(&fields, "gate_s")?;
        Self::new(nominal_hz, gate_s, parse_values(lines)?)
    }
}

/// `a / b` as an exact integer, or `None` when it is not one.
pub(crate) fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let k = r.round();
    (k >= 0.0 && (r - k).abs() <= 1e-9 * k.max(1.0)).then_some(k as usize)
}

/// Emulates a Π-type counter: reading `k` is the mean of the samples in gate
/// `k`; gates are separated by the dead time and a trailing partial gate is
/// dropped.
pub fn count(trace: &FrequencyTrace, cfg: &CounterConfig) -> Result<CounterSeries> {
    cfg.validate()?;
    let gate = integer_ratio(cfg.gate_s, trace.dt).ok_or_else(|| {
        Error::Parameter(format!(
            "gate {} s is not an integer multiple of dt {} s",
            cfg.gate_s, trace.dt
        ))
    })?;
    if gate < 2 {
        return param(format!(
            "gate {} s spans fewer than 2 samples of dt {} s",
            cfg.gate_s, trace.dt
        ));
    }
    let dead = integer_ratio(cfg.dead_time_s, trace.dt).ok_or_else(|| {
        Error::Parameter(format!(
            "dead time {} s is not an integer multiple of dt {} s",
            cfg.dead_time_s, trace.dt
        ))
    })?;
    let readings: Vec<f64> = trace
        .samples
        .chunks(gate + dead)
        .filter(|c| c.len() >= gate)
        .map(|c| c[..gate].iter().sum::<f64>() / gate as f64)
        .collect();
    if readings.is_empty() {
        return param("trace is shorter than one gate");
    }
    CounterSeries::new(trace.nominal_hz, cfg.gate_s, readings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Hz,
    Fractional,
}

impl Units {
    pub fn as_str(self) -> &'static str {
        match self {
            Units::Hz => "hz",
            Units::Fractional => "fractional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Overlapping,
    NonOverlapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllanPoint {
    pub tau_s: f64,
    pub sigma: f64,
    pub n_pairs: usize,
}

impl AllanPoint {
    /// Half-width of the `σ/√n_pairs` band.
    pub fn error_band(&self) -> f64 {
        self.sigma / (self.n_pairs as f64).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllanResult {
    pub points: Vec<AllanPoint>,
    pub units: Units,
    pub estimator: Estimator,
    /// Requested τ values too long for the series.
    #[serde(default)]
    pub omitted_taus: Vec<f64>,
    /// σ values in the opposite units this result was converted from, so a
    /// conversion round trip restores them bit for bit.
    #[serde(skip)]
    origin: Option<(Units, u64, Vec<f64>)>,
}

impl PartialEq for AllanResult {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
            && self.units == other.units
            && self.estimator == other.estimator
            && self.omitted_taus == other.omitted_taus
    }
}

impl AllanResult {
    pub fn sigma_at(&self, tau: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| (p.tau_s - tau).abs() <= 1e-9 * tau.max(1.0))
            .map(|p| p.sigma)
    }

    pub fn has_omissions(&self) -> bool {
        !self.omitted_taus.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tau_s,sigma,units,n_pairs")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_float(p.tau_s),
                fmt_float(p.sigma),
                self.units.as_str(),
                p.n_pairs
            )?;
        }
        Ok(())
    }
}

/// Octave τ grid `{1, 2, 4, …}·gate` up to a quarter of the span.
pub fn octave_taus(series: &CounterSeries) -> Vec<f64> {
    let max_m = series.readings.len() / 4;
    let mut taus = Vec::new();
    let mut m = 1usize;
    while m <= max_m.max(1) {
        taus.push(m as f64 * series.gate_s);
        m *= 2;
    }
    taus
}

fn resolve_multiples(series: &CounterSeries, taus: &[f64]) -> Result<Vec<usize>> {
    let mut prev = 0usize;
    let mut ms = Vec::with_capacity(taus.len());
    for &tau in taus {
        let m = integer_ratio(tau, series.gate_s)
            .filter(|&m| m >= 1)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "tau {tau} s is not a positive multiple of the gate {} s",
                    series.gate_s
                ))
            })?;
        if m <= prev {
            return param("tau values must be strictly increasing");
        }
        prev = m;
        ms.push(m);
    }
    Ok(ms)
}

/// Means of every length-`m` window of `y` (overlapping starts).
fn window_means(y: &[f64], m: usize) -> Vec<f64> {
    let count = y.len() + 1 - m;
    let mf = m as f64;
    if m <= LITERAL_WINDOW {
        return (0..count)
            .map(|k| y[k..k + m].iter().sum::<f64>() / mf)
            .collect();
    }
    let mut out = Vec::with_capacity(count);
    let mut s = 0.0;
    for k in 0..count {
        if k % RESYNC == 0 {
            s = y[k..k + m].iter().sum::<f64>();
        } else {
            s += y[k + m - 1] - y[k - 1];
        }
        out.push(s / mf);
    }
    out
}

fn overlapping_point(y: &[f64], m: usize) -> (f64, usize) {
    let avg = window_means(y, m);
    let pairs = y.len() + 1 - 2 * m;
    let mut acc = 0.0;
    for k in 0..pairs {
        let d = avg[k + m] - avg[k];
        acc += d * d;
    }
    ((acc / (2.0 * pairs as f64)).sqrt(), pairs)
}

fn non_overlapping_point(y: &[f64], m: usize) -> (f64, usize) {
    let mf = m as f64;
    let blocks: Vec<f64> = y
        .chunks_exact(m)
        .map(|c| c.iter().sum::<f64>() / mf)
        .collect();
    let pairs = blocks.len() - 1;
    let mut acc = 0.0;
    for k in 0..pairs {
        let d = blocks[k + 1] - blocks[k];
        acc += d * d;
    }
    ((acc / (2.0 * pairs as f64)).sqrt(), pairs)
}

fn adev_impl(
    series: &CounterSeries,
    taus: &[f64],
    estimator: Estimator,
    exec: Exec,
) -> Result<AllanResult> {
    let ms = resolve_multiples(series, taus)?;
    let y = &series.readings;
    let (usable, omitted): (Vec<usize>, Vec<usize>) =
        ms.into_iter().partition(|&m| 2 * m <= y.len());
    let points = exec.map_slice(&usable, |&m| {
        let (sigma, n_pairs) = match estimator {
            Estimator::Overlapping => overlapping_point(y, m),
            Estimator::NonOverlapping => non_overlapping_point(y, m),
        };
        AllanPoint {
            tau_s: m as f64 * series.gate_s,
            sigma,
            n_pairs,
        }
    });
    Ok(AllanResult {
        points,
        units: Units::Hz,
        estimator,
        omitted_taus: omitted
            .into_iter()
            .map(|m| m as f64 * series.gate_s)
            .collect(),
        origin: None,
    })
}

/// Overlapping Allan deviation, `σ²(τ) = ½⟨(ȳ_{k+m} − ȳ_k)²⟩` over every
/// start `k`. τ values longer than half the series are omitted and listed in
/// `omitted_taus`.
pub fn adev_overlapping(series: &CounterSeries, taus: &[f64]) -> Result<AllanResult> {
    adev_impl(series, taus, Estimator::Overlapping, Exec::default())
}

pub fn adev_overlapping_with(
    series: &CounterSeries,
    taus: &[f64],
    exec: Exec,
) -> Result<AllanResult> {
    adev_impl(series, taus, Estimator::Overlapping, exec)
}

/// Allan deviation over disjoint `m`-gate blocks.
pub fn adev_nonoverlapping(series: &CounterSeries, taus: &[f64]) -> Result<AllanResult> {
    adev_impl(series, taus, Estimator::NonOverlapping, Exec::default())
}

pub fn adev_nonoverlapping_with(
    series: &CounterSeries,
    taus: &[f64],
    exec: Exec,
) -> Result<AllanResult> {
    adev_impl(series, taus, Estimator::NonOverlapping, exec)
}

fn convert(result: &AllanResult, nominal_hz: u64, to: Units) -> Result<AllanResult> {
    if nominal_hz == 0 {
        return param("nominal_hz must be > 0 for unit conversion");
    }
    if result.units == to {
        return param(format!("result is already in {} units", to.as_str()));
    }
    let from_sigmas: Vec<f64> = result.points.iter().map(|p| p.sigma).collect();
    let nu = nominal_hz as f64;
    let restored = match &result.origin {
        Some((u, n, s)) if *u == to && *n == nominal_hz => Some(s.clone()),
        _ => None,
    };
    let sigmas = restored.unwrap_or_else(|| {
        from_sigmas
            .iter()
            .map(|s| match to {
                Units::Fractional => s / nu,
                Units::Hz => s * nu,
            })
            .collect()
    });
    let points = result
        .points
        .iter()
        .zip(sigmas)
        .map(|(p, sigma)| AllanPoint { sigma, ..*p })
        .collect();
    Ok(AllanResult {
        points,
        units: to,
        estimator: result.estimator,
        omitted_taus: result.omitted_taus.clone(),
        origin: Some((result.units, nominal_hz, from_sigmas)),
    })
}

pub fn to_fractional(result: &AllanResult, nominal_hz: u64) -> Result<AllanResult> {
    convert(result, nominal_hz, Units::Fractional)
}

pub fn to_absolute(result: &AllanResult, nominal_hz: u64) -> Result<AllanResult> {
    convert(result, nominal_hz, Units::Hz)
}

/// Max − min over the leading `window_s` of the series (whole series if `None`).
pub fn peak_to_peak(series: &CounterSeries, window_s: Option<f64>) -> Result<f64> {
    let n = match window_s {
        None => series.readings.len(),
        Some(w) => {
            if !(w.is_finite() && w >= 0.0) {
                return param(format!("window {w} s is invalid"));
            }
            let k = (w / series.gate_s).round() as usize;
            if k > series.readings.len() {
                return param(format!(
                    "window {w} s exceeds the series span {} s",
                    series.span()
                ));
            }
            k
        }
    };
    if n == 0 {
        return param("peak-to-peak window is empty");
    }
    let r = &series.readings[..n];
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = r.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub tau_range: (f64, f64),
    /// d log σ / d log τ.
    pub slope: f64,
    /// log10 σ at τ = 1 s.
    pub intercept: f64,
    /// RMS residual in log10 σ.
    pub residual: f64,
}

pub fn fit_noise_slope(result: &AllanResult, tau_min: f64, tau_max: f64) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = result
        .points
        .iter()
        .filter(|p| p.tau_s >= tau_min && p.tau_s <= tau_max && p.sigma > 0.0)
        .map(|p| (p.tau_s.log10(), p.sigma.log10()))
        .collect();
    if pts.len() < 3 {
        return param(format!(
            "slope fit needs >= 3 points in [{tau_min}, {tau_max}] s, found {}",
            pts.len()
        ));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(SlopeFit {
        tau_range: (tau_min, tau_max),
        slope,
        intercept,
        residual,
    })
}

/// Averaged-periodogram one-sided PSD (rectangular window, no detrending), so
/// `Σ S·Δf` equals the mean square of the analysed samples.
pub fn psd_estimate(trace: &FrequencyTrace, segments: usize) -> Result<Vec<(f64, f64)>> {
    if segments == 0 {
        return param("segments must be >= 1");
    }
    if trace.len() < 4 * segments {
        return param(format!(
            "trace of {} samples is too short for {segments} segments",
            trace.len()
        ));
    }
    let len = trace.len() / segments;
    let fft = FftPlanner::new().plan_fft_forward(len);
    let half = len / 2;
    let mut acc = vec![0.0; half + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for seg in trace.samples.chunks_exact(len).take(segments) {
        for (b, &x) in buf.iter_mut().zip(seg) {
            *b = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (j, a) in acc.iter_mut().enumerate() {
            let p = buf[j].norm_sqr() * trace.dt / len as f64;
            let twice = j != 0 && !(len.is_multiple_of(2) && j == half);
            *a += if twice { 2.0 * p } else { p };
        }
    }
    let df = 1.0 / (len as f64 * trace.dt);
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(j, a)| (j as f64 * df, a / segments as f64))
        .collect())
}
