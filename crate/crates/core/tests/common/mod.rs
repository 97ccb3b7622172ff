//! Reference implementations the library is checked against. They follow the
//! textbook definitions directly and make no attempt to be fast.
#![allow(dead_code)]

use std::path::PathBuf;

/// Overlapping two-sample variance from its definition: every start `i`,
/// two adjacent `m`-sample means, squared difference, averaged and halved.
pub fn adev_oracle(y: &[f64], m: usize) -> f64 {
    let pairs = y.len() + 1 - 2 * m;
    let mut acc = 0.0;
    for i in 0..pairs {
        let mut a = 0.0;
        for j in 0..m {
            a += y[i + j];
        }
        let mut b = 0.0;
        for j in 0..m {
            b += y[i + m + j];
        }
        let d = b / m as f64 - a / m as f64;
        acc += d * d;
    }
    (acc / (2.0 * pairs as f64)).sqrt()
}

/// Disjoint-block version of the same definition.
pub fn adev_nonoverlapping_oracle(y: &[f64], m: usize) -> f64 {
    let blocks = y.len() / m;
    let mean = |b: usize| y[b * m..(b + 1) * m].iter().sum::<f64>() / m as f64;
    let mut acc = 0.0;
    for b in 0..blocks - 1 {
        let d = mean(b + 1) - mean(b);
        acc += d * d;
    }
    (acc / (2.0 * (blocks - 1) as f64)).sqrt()
}

/// White frequency noise: `σ(τ) = √(h₀ / 2τ)`.
pub fn white_fm_adev(h0: f64, tau: f64) -> f64 {
    (h0 / (2.0 * tau)).sqrt()
}

/// Linear drift `D`: `σ(τ) = D·τ / √2`.
pub fn drift_adev(rate: f64, tau: f64) -> f64 {
    rate * tau / 2f64.sqrt()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for &(x, y) in points {
        num += (x.ln() - mx) * (y.ln() - my);
        den += (x.ln() - mx).powi(2);
    }
    num / den
}

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.json"))
}

pub fn load_scenario(name: &str) -> ols_core::scenario::ScenarioConfig {
    let text = std::fs::read_to_string(scenario_path(name)).unwrap();
    ols_core::scenario::validate_config(&text).unwrap()
}

pub const GOLDENS: [&str; 4] = [
    "empty",
    "fig3_freerun_1514",
    "fig4_inloop_1010",
    "fig4_crosscheck_1010",
];
