//! Seeded power-law frequency-noise synthesis and oscillator models.
//!
//! Noise is shaped in the frequency domain: complex Gaussian bins scaled by
//! `√S_ν(f)` on a grid padded to twice the record length, inverse-FFT'd, and
//! cropped. The padding keeps random-walk components from wrapping back on
//! themselves at the record ends. DC is always zero.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::trace::FrequencyTrace;

/// Exponents allowed in `S_ν(f) = Σ h_α f^α`.
pub const ALPHAS: [i8; 5] = [-2, -1, 0, 1, 2];

/// One-sided frequency-noise PSD recipe plus deterministic drift.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// `h_α` in Hz²/Hz·Hz^-α, keyed by α.
    #[serde(default)]
    pub h: BTreeMap<i8, f64>,
    /// Linear drift, Hz/s.
    #[serde(default)]
    pub drift_rate: f64,
    /// Random-walk FM diffusion, Hz²/s (variance growth of the frequency).
    #[serde(default)]
    pub drift_random_walk: f64,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn white(h0: f64) -> Self {
        Self::zero().with_h(0, h0)
    }

    pub fn with_h(mut self, alpha: i8, value: f64) -> Self {
        self.h.insert(alpha, value);
        self
    }

    pub fn with_drift(mut self, rate: f64) -> Self {
        self.drift_rate = rate;
        self
    }

    pub fn with_random_walk(mut self, diffusion: f64) -> Self {
        self.drift_random_walk = diffusion;
        self
    }

    pub fn h(&self, alpha: i8) -> f64 {
        self.h.get(&alpha).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (&alpha, &v) in &self.h {
            if !ALPHAS.contains(&alpha) {
                return param(format!("noise exponent {alpha} not in {{-2,-1,0,1,2}}"));
            }
            if !(v >= 0.0 && v.is_finite()) {
                return param(format!("h_{alpha} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.drift_random_walk >= 0.0 && self.drift_random_walk.is_finite()) {
            return param(format!(
                "drift_random_walk must be finite and >= 0, got {}",
                self.drift_random_walk
            ));
        }
        if !self.drift_rate.is_finite() {
            return param("drift_rate must be finite");
        }
        Ok(())
    }

    /// True when there is no stochastic component.
    pub fn is_quiet(&self) -> bool {
        self.h.values().all(|&v| v == 0.0) && self.drift_random_walk == 0.0
    }

    pub fn is_zero(&self) -> bool {
        self.is_quiet() && self.drift_rate == 0.0
    }

    /// `h_{-2}` equivalent of the random-walk diffusion: a Wiener process with
    /// `Var = D·t` has one-sided PSD `D / (2π² f²)`.
    pub fn random_walk_h(&self) -> f64 {
        self.drift_random_walk / (2.0 * PI * PI)
    }

    /// One-sided PSD at `f > 0`, Hz²/Hz.
    pub fn psd(&self, f: f64) -> f64 {
        let mut s: f64 = self.h.iter().map(|(&a, &v)| v * f.powi(a as i32)).sum();
        s += self.random_walk_h() / (f * f);
        s
    }

    /// Rescales a fractional (dimensionless) recipe to a carrier, or any recipe
    /// by a constant gain: PSD terms by `k²`, drift by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            h: self.h.iter().map(|(&a, &v)| (a, v * k * k)).collect(),
            drift_rate: self.drift_rate * k,
            drift_random_walk: self.drift_random_walk * k * k,
        }
    }
}

/// Noise recipe bound to a carrier. A present `adev_profile` (τ s, fractional
/// σ_y) overrides `noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillatorModel {
    pub nominal_hz: u64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adev_profile: Option<Vec<(f64, f64)>>,
}

impl OscillatorModel {
    pub fn new(nominal_hz: u64, noise: NoiseSpec) -> Result<Self> {
        let m = Self {
            nominal_hz,
            noise,
            adev_profile: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn ideal(nominal_hz: u64) -> Result<Self> {
        Self::new(nominal_hz, NoiseSpec::zero())
    }

    pub fn with_profile(nominal_hz: u64, profile: Vec<(f64, f64)>) -> Result<Self> {
        let m = Self {
            nominal_hz,
            noise: NoiseSpec::zero(),
            adev_profile: Some(profile),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nominal_hz == 0 {
            return param("oscillator nominal_hz must be > 0");
        }
        self.noise.validate()?;
        if let Some(p) = &self.adev_profile {
            validate_profile(p)?;
        }
        Ok(())
    }

    /// The absolute-Hz recipe actually synthesized for a record of `n` samples
    /// at `dt`. Profiles are fitted against the exact expected Allan variance
    /// of that sampling grid, so the fit is honest even at τ = dt. A record
    /// shorter than twice the longest profile τ is fitted on a grid extended
    /// to that length.
    pub fn effective_noise(&self, n: usize, dt: f64) -> Result<NoiseSpec> {
        match &self.adev_profile {
            None => Ok(self.noise.clone()),
            Some(p) => {
                let tau_max = p.last().map_or(0.0, |&(t, _)| t);
                let n_fit = n.max(2 * (tau_max / dt).round() as usize);
                let fit = fit_profile(p, n_fit, dt)?;
                Ok(fit.to_spec().scaled(self.nominal_hz as f64))
            }
        }
    }

    pub fn synthesize(&self, duration: f64, dt: f64, seed: u64) -> Result<FrequencyTrace> {
        let n = sample_count(duration, dt)?;
        let spec = self.effective_noise(n, dt)?;
        let mut t = synth_power_law(&spec, duration, dt, seed)?;
        t.nominal_hz = self.nominal_hz;
        Ok(t)
    }
}

fn validate_profile(p: &[(f64, f64)]) -> Result<()> {
    for w in p.windows(2) {
        if !(w[1].0 > w[0].0) {
            return param("adev_profile tau values must be strictly increasing");
        }
    }
    for &(tau, sigma) in p {
        if !(tau > 0.0 && tau.is_finite()) {
            return param(format!("adev_profile tau must be positive, got {tau}"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return param(format!("adev_profile sigma must be positive, got {sigma}"));
        }
    }
    Ok(())
}

/// Common-mode noise shared by every comb line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceNoise {
    /// Fractional recipe (`h_α` of `S_y`), scaled by ν² onto each line.
    FractionalNoise(NoiseSpec),
    /// Fractional (τ, σ_y) profile.
    AdevProfile(Vec<(f64, f64)>),
}

impl Default for ReferenceNoise {
    fn default() -> Self {
        ReferenceNoise::FractionalNoise(NoiseSpec::zero())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombModel {
    pub f_rep_hz: u64,
    #[serde(default)]
    pub f_ceo_hz: u64,
    #[serde(default)]
    pub reference: ReferenceNoise,
}

impl CombModel {
    pub fn new(f_rep_hz: u64, f_ceo_hz: u64, reference: ReferenceNoise) -> Result<Self> {
        let c = Self {
            f_rep_hz,
            f_ceo_hz,
            reference,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_rep_hz == 0 {
            return param("comb f_rep must be > 0");
        }
        if self.f_ceo_hz >= self.f_rep_hz {
            return param("comb f_ceo must satisfy 0 <= f_ceo < f_rep");
        }
        match &self.reference {
            ReferenceNoise::FractionalNoise(s) => s.validate(),
            ReferenceNoise::AdevProfile(p) => validate_profile(p),
        }
    }

    /// Exact line frequency `f_ceo + n·f_rep`.
    pub fn line_hz(&self, n: u64) -> Result<u64> {
        n.checked_mul(self.f_rep_hz)
            .and_then(|x| x.checked_add(self.f_ceo_hz))
            .ok_or_else(|| Error::Parameter(format!("comb line {n} overflows the carrier range")))
    }
}

/// Lorentzian FWHM `Δν` corresponds to white FM with `h₀ = Δν/π`.
pub fn laser_from_linewidth(
    nominal_hz: u64,
    fwhm_linewidth: f64,
    drift_rate: f64,
    random_walk: f64,
) -> Result<OscillatorModel> {
    if !(fwhm_linewidth > 0.0 && fwhm_linewidth.is_finite()) {
        return param(format!("linewidth must be positive, got {fwhm_linewidth}"));
    }
    let noise = NoiseSpec::white(fwhm_linewidth / PI)
        .with_drift(drift_rate)
        .with_random_walk(random_walk);
    OscillatorModel::new(nominal_hz, noise)
}

pub fn comb_line_oscillator(comb: &CombModel, n: u64) -> Result<OscillatorModel> {
    comb.validate()?;
    if n == 0 {
        return param("comb line index must be >= 1");
    }
    let nominal_hz = comb.line_hz(n)?;
    match &comb.reference {
        ReferenceNoise::FractionalNoise(s) => {
            OscillatorModel::new(nominal_hz, s.scaled(nominal_hz as f64))
        }
        ReferenceNoise::AdevProfile(p) => OscillatorModel::with_profile(nominal_hz, p.clone()),
    }
}

pub(crate) fn sample_count(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return param(format!("dt must be positive, got {dt}"));
    }
    if !(duration.is_finite() && duration >= 2.0 * dt) {
        return param(format!(
            "duration {duration} s must be at least 2·dt ({dt} s)"
        ));
    }
    Ok((duration / dt).round() as usize)
}

/// Synthesizes `round(duration/dt)` samples of `spec`, deterministically in
/// `(spec, duration, dt, seed)`. The returned trace carries `nominal_hz = 0`.
pub fn synth_power_law(
    spec: &NoiseSpec,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<FrequencyTrace> {
    spec.validate()?;
    let n = sample_count(duration, dt)?;
    let mut samples = if spec.is_quiet() {
        vec![0.0; n]
    } else {
        let bins = noise_spectrum(spec, n, dt, seed);
        spectrum_to_samples(bins, n)
    };
    add_drift(&mut samples, spec.drift_rate, dt);
    FrequencyTrace::new(0, dt, samples, seed)
}

pub(crate) fn add_drift(samples: &mut [f64], rate: f64, dt: f64) {
    if rate != 0.0 {
        for (k, s) in samples.iter_mut().enumerate() {
            *s += rate * (k as f64 * dt);
        }
    }
}

/// Length of the padded synthesis grid for `n` output samples.
pub(crate) fn padded_len(n: usize) -> usize {
    2 * n.max(1)
}

/// Hermitian spectrum of the stochastic part of `spec` on the padded grid.
///
/// Bin `j` carries variance `S(f_j)·Δf` in the time domain. Draw order is
/// fixed (bins ascending, real before imaginary) so the output depends only on
/// the seed.
pub(crate) fn noise_spectrum(spec: &NoiseSpec, n: usize, dt: f64, seed: u64) -> Vec<Complex<f64>> {
    let m = padded_len(n);
    let half = m / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bins = vec![Complex::new(0.0, 0.0); m];
    let df = 1.0 / (m as f64 * dt);
    let scale = m as f64 / (4.0 * dt);
    for j in 1..half {
        let sd = (spec.psd(j as f64 * df) * scale).sqrt();
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        bins[j] = Complex::new(re * sd, im * sd);
        bins[m - j] = bins[j].conj();
    }
    let sd_nyq = (spec.psd(half as f64 * df) * m as f64 / dt).sqrt();
    let re: f64 = StandardNormal.sample(&mut rng);
    bins[half] = Complex::new(re * sd_nyq, 0.0);
    bins
}

/// Inverse FFT of a Hermitian spectrum, normalized, cropped to `n` samples.
pub(crate) fn spectrum_to_samples(mut bins: Vec<Complex<f64>>, n: usize) -> Vec<f64> {
    let m = bins.len();
    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(m).process(&mut bins);
    let norm = 1.0 / m as f64;
    bins.iter().take(n).map(|c| c.re * norm).collect()
}

/// Bin frequencies of the padded grid, index `j` → `j/(M·dt)`.
pub(crate) fn bin_frequency(j: usize, m: usize, dt: f64) -> f64 {
    j as f64 / (m as f64 * dt)
}

/// Expected overlapping Allan variance at `τ = m_avg·dt` of the process
/// `noise_spectrum` synthesizes for a PSD `psd`, evaluated bin by bin:
/// `Σ S(f_j)Δf · 2 sin⁴(πf τ) / (m² sin²(πf dt))`.
pub fn expected_avar<F: Fn(f64) -> f64>(psd: F, n: usize, dt: f64, m_avg: usize) -> f64 {
    let m = padded_len(n);
    let df = 1.0 / (m as f64 * dt);
    let mf = m_avg as f64;
    (1..=m / 2)
        .map(|j| {
            let f = j as f64 * df;
            let a = (PI * f * mf * dt).sin();
            let b = (PI * f * dt).sin();
            psd(f) * df * 2.0 * a.powi(4) / (mf * mf * b * b)
        })
        .sum()
}

/// Fractional power-law decomposition of an ADEV profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileFit {
    pub white_fm: f64,
    pub flicker_fm: f64,
    pub random_walk_fm: f64,
}

impl ProfileFit {
    pub fn to_spec(self) -> NoiseSpec {
        let mut s = NoiseSpec::zero();
        if self.white_fm > 0.0 {
            s = s.with_h(0, self.white_fm);
        }
        if self.flicker_fm > 0.0 {
            s = s.with_h(-1, self.flicker_fm);
        }
        if self.random_walk_fm > 0.0 {
            s = s.with_h(-2, self.random_walk_fm);
        }
        s
    }

    /// Continuous-time Allan deviation of the fitted recipe (fractional).
    pub fn adev(self, tau: f64) -> f64 {
        (self.white_fm / (2.0 * tau)
            + 2.0 * LN_2 * self.flicker_fm
            + 2.0 * PI * PI / 3.0 * self.random_walk_fm * tau)
            .sqrt()
    }
}

const BASIS: [i8; 3] = [0, -1, -2];

/// Decomposes a profile into non-negative {white, flicker, random-walk} FM by
/// relative least squares on σ², trying every component subset.
///
/// Among fits of equal quality: fewer components first, then fits that keep
/// white FM (so the shortest τ extrapolates as white FM toward smaller τ),
/// then the fit closest to the log–log interpolation of the profile between
/// its points.
pub fn fit_profile(profile: &[(f64, f64)], n: usize, dt: f64) -> Result<ProfileFit> {
    if profile.len() < 2 {
        return param("adev_profile needs at least 2 points");
    }
    validate_profile(profile)?;
    let m_of = |tau: f64| -> Result<usize> {
        let m = (tau / dt).round();
        if m < 1.0 {
            return param(format!("profile tau {tau} s is shorter than dt {dt} s"));
        }
        if 2.0 * m > n as f64 {
            return param(format!(
                "profile tau {tau} s needs a record of at least {} s",
                2.0 * tau
            ));
        }
        Ok(m as usize)
    };
    let ms = profile
        .iter()
        .map(|&(t, _)| m_of(t))
        .collect::<Result<Vec<_>>>()?;
    let basis_at = |m: usize| -> [f64; 3] {
        let mut b = [0.0; 3];
        for (c, &alpha) in BASIS.iter().enumerate() {
            b[c] = expected_avar(|f| f.powi(alpha as i32), n, dt, m);
        }
        b
    };
    let rows: Vec<[f64; 3]> = ms
        .iter()
        .zip(profile)
        .map(|(&m, &(_, s))| {
            let b = basis_at(m);
            [b[0] / (s * s), b[1] / (s * s), b[2] / (s * s)]
        })
        .collect();
    let mids: Vec<(usize, f64)> = profile
        .windows(2)
        .map(|w| {
            let tau = (w[0].0 * w[1].0).sqrt();
            let sig = (w[0].1 * w[1].1).sqrt();
            (((tau / dt).round() as usize).max(1), sig)
        })
        .collect();
    let mid_basis: Vec<[f64; 3]> = mids.iter().map(|&(m, _)| basis_at(m)).collect();

    struct Cand {
        coef: [f64; 3],
        resid: f64,
        size: usize,
        white: bool,
        interp: f64,
    }
    let mut cands = Vec::new();
    for mask in 1u8..8 {
        let idx: Vec<usize> = (0..3).filter(|c| mask & (1 << c) != 0).collect();
        if idx.len() > profile.len() {
            continue;
        }
        let Some(x) = solve_normal(&rows, &idx) else {
            continue;
        };
        if x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            continue;
        }
        let mut coef = [0.0; 3];
        for (k, &c) in idx.iter().enumerate() {
            coef[c] = x[k];
        }
        let resid: f64 = rows
            .iter()
            .map(|r| {
                let e = r[0] * coef[0] + r[1] * coef[1] + r[2] * coef[2] - 1.0;
                e * e
            })
            .sum();
        let interp: f64 = mid_basis
            .iter()
            .zip(&mids)
            .map(|(b, &(_, sig))| {
                let model = b[0] * coef[0] + b[1] * coef[1] + b[2] * coef[2];
                let d = 0.5 * model.max(f64::MIN_POSITIVE).ln() - sig.ln();
                d * d
            })
            .sum();
        cands.push(Cand {
            coef,
            resid,
            size: idx.len(),
            white: coef[0] > 0.0,
            interp,
        });
    }
    let best_resid = cands.iter().map(|c| c.resid).fold(f64::INFINITY, f64::min);
    if !best_resid.is_finite() {
        return param("adev_profile cannot be represented by non-negative power-law terms");
    }
    // Fits within ~1% rms of the best count as equally good; the finite-record
    // bias of the basis alone is about that size.
    let tol = 1e-4 * rows.len() as f64 + 1e-6 * best_resid;
    let best = cands
        .into_iter()
        .filter(|c| c.resid <= best_resid + tol)
        .min_by(|a, b| {
            a.size
                .cmp(&b.size)
                .then(b.white.cmp(&a.white))
                .then(a.interp.total_cmp(&b.interp))
        })
        .expect("at least the best candidate survives");
    Ok(ProfileFit {
        white_fm: best.coef[0],
        flicker_fm: best.coef[1],
        random_walk_fm: best.coef[2],
    })
}

/// Least squares on the selected columns (≤ 3) via normal equations.
fn solve_normal(rows: &[[f64; 3]], idx: &[usize]) -> Option<Vec<f64>> {
    let k = idx.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for r in rows {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += r[idx[i]] * r[idx[j]];
            }
            a[i][k] += r[idx[i]];
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        let pivot_row = a[col].clone();
        for (row, r) in a.iter_mut().enumerate() {
            if row != col {
                let f = r[col] / pivot_row[col];
                for (x, p) in r[col..=k].iter_mut().zip(&pivot_row[col..=k]) {
                    *x -= f * p;
                }
            }
        }
    }
    let x: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Synthesizes a trace whose Allan deviation follows `model.adev_profile`.
pub fn trace_from_adev_profile(
    model: &OscillatorModel,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<FrequencyTrace> {
    match &model.adev_profile {
        Some(p) if p.len() >= 2 => model.synthesize(duration, dt, seed),
        Some(_) => param("adev_profile needs at least 2 points"),
        None => param("oscillator has no adev_profile"),
    }
}

/// Synthesizes one trace per seed.
pub fn synth_ensemble(
    spec: &NoiseSpec,
    duration: f64,
    dt: f64,
    seeds: &[u64],
    exec: crate::Exec,
) -> Result<Vec<FrequencyTrace>> {
    exec.map_slice(seeds, |&s| synth_power_law(spec, duration, dt, s))
        .into_iter()
        .collect()
}
