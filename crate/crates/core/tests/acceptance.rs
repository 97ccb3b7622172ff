//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs under `cargo test` as a plain binary.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ols_core::chain::{afc_budget, comb_beat, ChainSpec};
use ols_core::lockloop::{
    basin_scan, cable_delay, capture_halfwidth, discriminator_slope, lock_points, simulate_lock,
    spectral_lock, spectral_lock_run, DiscriminatorConfig, LockSetup, ServoConfig,
    TemperatureProfile, ThermalModel,
};
use ols_core::metrology::{adev_overlapping, count, CounterConfig, CounterSeries};
use ols_core::noisegen::{
    synth_ensemble, synth_power_law, CombModel, NoiseSpec, OscillatorModel, ReferenceNoise,
};
use ols_core::scenario::{build_lock_setup, run_scenario_in, RunReport};
use ols_core::{Exec, FrequencyTrace};

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("runtime {:.2} s exceeds {limit_s} s", elapsed.as_secs_f64())
    })
}

fn adev1(trace: &FrequencyTrace, gate: f64) -> f64 {
    let s = count(trace, &CounterConfig::new(gate)).unwrap();
    adev_overlapping(&s, &[gate]).unwrap().points[0].sigma
}

fn c1_adev_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xADE5);
    let mut compared = 0usize;
    for case in 0..200 {
        let len = rng.random_range(2..=64usize);
        let scale = 10f64.powi(rng.random_range(-3..=6));
        let offset = rng.random_range(-1e3..1e3);
        let y: Vec<f64> = (0..len)
            .map(|_| offset + scale * rng.random_range(-1.0..1.0))
            .collect();
        let series = CounterSeries::new(0, 1.0, y.clone()).unwrap();
        let taus: Vec<f64> = (1..=len / 2).map(|m| m as f64).collect();
        let r = adev_overlapping(&series, &taus).unwrap();
        check(r.points.len() == taus.len(), || {
            format!("case {case}: taus omitted")
        })?;
        for p in &r.points {
            let want = adev_oracle(&y, p.tau_s as usize);
            check(p.sigma.to_bits() == want.to_bits(), || {
                format!("case {case} tau {}: {} != {}", p.tau_s, p.sigma, want)
            })?;
            compared += 1;
        }
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!("{compared} points bit-identical over 200 series"))
}

fn c2_white_fm() -> Outcome {
    let start = Instant::now();
    let spec = NoiseSpec::white(2.0);
    let seeds: Vec<u64> = (0..20).collect();
    let traces = synth_ensemble(&spec, 4096.0, 0.5, &seeds, Exec::default()).unwrap();
    let taus: Vec<f64> = (0..=6).map(|k| 2f64.powi(k)).collect();
    let mut mean = vec![0.0; taus.len()];
    for t in &traces {
        let s = count(t, &CounterConfig::new(1.0)).unwrap();
        let r = adev_overlapping(&s, &taus).unwrap();
        for (acc, p) in mean.iter_mut().zip(&r.points) {
            *acc += p.sigma / traces.len() as f64;
        }
    }
    let want = white_fm_adev(2.0, 1.0);
    let slope = loglog_slope(
        &taus
            .iter()
            .copied()
            .zip(mean.iter().copied())
            .collect::<Vec<_>>(),
    );
    check((mean[0] / want - 1.0).abs() <= 0.10, || {
        format!("ADEV(1 s) = {}", mean[0])
    })?;
    check((slope + 0.5).abs() <= 0.05, || format!("slope {slope}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "mean ADEV(1 s) = {:.4} Hz, slope {slope:.4}",
        mean[0]
    ))
}

fn c3_drift() -> Outcome {
    let spec = NoiseSpec::zero().with_drift(1.0);
    let trace = synth_power_law(&spec, 64.0, 0.5, 7).unwrap();
    let s = count(&trace, &CounterConfig::new(1.0)).unwrap();
    let r = adev_overlapping(&s, &[1.0, 2.0, 4.0]).unwrap();
    let mut worst = 0.0f64;
    for p in &r.points {
        let rel = (p.sigma / drift_adev(1.0, p.tau_s) - 1.0).abs();
        worst = worst.max(rel);
    }
    check(worst <= 1e-9, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

fn c4_discriminator() -> Outcome {
    let delay = cable_delay(5.0, 0.66).map_err(|e| e.to_string())?;
    let disc = DiscriminatorConfig::new(delay, 1.0).unwrap();
    let near30 = lock_points(&disc, 0.0, 100e6)
        .unwrap()
        .into_iter()
        .map(|l| l.frequency_hz)
        .min_by(|a, b| (a - 30e6).abs().total_cmp(&(b - 30e6).abs()))
        .ok_or("no lock point in the passband")?;
    check((near30 / 30e6 - 1.0).abs() <= 0.02, || {
        format!("nearest lock point {near30} Hz")
    })?;

    let mut worst = 0.0f64;
    for tau in [5e-9, 25e-9, 100e-9] {
        let d = DiscriminatorConfig::banded(tau, 0.8, 200e6, 200e6).unwrap();
        let f = lock_points(&d, 0.0, 400e6).unwrap()[0].frequency_hz;
        let prod = discriminator_slope(&d, f).unwrap().abs() * capture_halfwidth(&d);
        let want = std::f64::consts::PI * d.amplitude_v / 2.0;
        worst = worst.max((prod / want - 1.0).abs());
    }
    check(worst <= 1e-12, || {
        format!("slope·halfwidth off by {worst:e}")
    })?;

    let d25 = DiscriminatorConfig::new(25e-9, 1.0).unwrap();
    let h = capture_halfwidth(&d25);
    let slope = discriminator_slope(&d25, 30e6).unwrap();
    let setup = LockSetup {
        laser: OscillatorModel::ideal(1_000_030_000_000).unwrap(),
        reference: OscillatorModel::ideal(1_000_000_000_000).unwrap(),
        discriminator: d25,
        servo: ServoConfig::for_bandwidth(100.0, slope, 50e6, 1e-4).unwrap(),
        f_lock_hz: 30e6,
        thermal: None,
    };
    let offsets: Vec<i64> = (-10..=10)
        .map(|k| (k as f64 * 0.23 * h).round() as i64)
        .collect();
    let got = basin_scan(&setup, &offsets, 0.2, 1e-4, Exec::default()).unwrap();
    for (off, ok) in offsets.iter().zip(&got) {
        let predicted = (*off as f64).abs() < h;
        check(predicted == *ok, || {
            format!("offset {off} Hz: converged={ok}, predicted {predicted}")
        })?;
    }
    Ok(format!(
        "lock point {:.4} MHz, basin {}/21 captured as predicted",
        near30 / 1e6,
        got.iter().filter(|&&b| b).count()
    ))
}

fn run_golden(name: &str) -> (RunReport, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let report = run_scenario_in(&load_scenario(name), dir.path()).unwrap();
    (report, dir)
}

fn stat(r: &RunReport, name: &str) -> Result<f64, String> {
    r.statistics
        .get(name)
        .copied()
        .ok_or_else(|| format!("missing statistic {name}"))
}

fn in_range(v: f64, lo: f64, hi: f64, what: &str) -> Result<(), String> {
    check(lo <= v && v <= hi, || {
        format!("{what} = {v} outside [{lo}, {hi}]")
    })
}

fn c5_fig3() -> Outcome {
    let start = Instant::now();
    let (r, _dir) = run_golden("fig3_freerun_1514");
    let free = stat(&r, "lock1514.freerun.pp_hz@3600")?;
    let inloop = stat(&r, "lock1514.inloop.pp_hz@3600")?;
    let locked = stat(&r, "lock1514.locked.pp_hz@3600")?;
    let ool = stat(&r, "lock1514.outofloop.adev_hz@1")?;
    in_range(free, 12.5e6, 50e6, "free-run pp")?;
    in_range(inloop, 0.0, 250e3, "locked in-loop pp")?;
    in_range(locked, 0.0, 250e3, "locked laser pp")?;
    check(free / inloop >= 100.0, || {
        format!("suppression only {}", free / inloop)
    })?;
    in_range(ool, 300.0, 1500.0, "out-of-loop ADEV(1 s)")?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "free {:.2} MHz, locked {:.1} kHz (×{:.0}), out-of-loop {:.0} Hz",
        free / 1e6,
        inloop / 1e3,
        free / inloop,
        ool
    ))
}

fn c6_fig4() -> Outcome {
    let start = Instant::now();
    let (r, _dir) = run_golden("fig4_inloop_1010");
    let free = stat(&r, "lock1010.freerun.pp_hz@3600")?;
    let inloop = stat(&r, "lock1010.inloop.adev_frac@1")?;
    in_range(free, 6e6, 24e6, "free-run pp")?;
    in_range(inloop, 0.8e-12, 5e-12, "in-loop ADEV(1 s)")?;
    let taus = r.config.measurements.taus.clone().unwrap();
    for t in &taus {
        let a = stat(&r, &format!("lock1010.inloop.adev_hz@{t}"))?;
        let b = stat(&r, &format!("lock1010.freerun.adev_hz@{t}"))?;
        check(a <= b, || format!("in-loop {a} > free-run {b} at {t} s"))?;
    }
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "free {:.2} MHz, in-loop ADEV(1 s) {:.2e}, below free-run at {} taus",
        free / 1e6,
        inloop,
        taus.len()
    ))
}

fn c7_thermal() -> Outcome {
    let disc = DiscriminatorConfig::new(25e-9, 1.0).unwrap();
    let slope = discriminator_slope(&disc, 30e6).unwrap();
    let setup = LockSetup {
        laser: OscillatorModel::ideal(500_000_030_000_000).unwrap(),
        reference: OscillatorModel::ideal(500_000_000_000_000).unwrap(),
        discriminator: disc,
        servo: ServoConfig::for_bandwidth(100.0, slope, 50e6, 1e-4).unwrap(),
        f_lock_hz: 30e6,
        thermal: Some(
            ThermalModel::new(
                1.7e-4,
                TemperatureProfile::Ramp {
                    delta_k: 2.0,
                    over_s: 4.0,
                },
            )
            .unwrap(),
        ),
    };
    let run = simulate_lock(&setup, 6.0, 1e-4, 0).unwrap();
    let beat = &run.inloop_beat_trace;
    let n = beat.len();
    let drift = beat.samples[n - 1] - beat.samples[0];
    let want = 30e6 * 1.7e-4 * 2.0;
    check((drift.abs() / want - 1.0).abs() <= 0.05, || {
        format!("beat drifted {drift} Hz")
    })?;
    let mut worst = 0.0f64;
    for k in n / 20..n {
        let f = beat.nominal_hz as f64 + beat.samples[k];
        worst = worst.max((f - run.thermal_lockpoint_trace[k]).abs());
    }
    check(worst <= 0.01 * want, || {
        format!("beat strays {worst} Hz from the lock point")
    })?;
    Ok(format!(
        "drift {:.3} kHz, tracking error ≤ {worst:.2} Hz",
        drift / 1e3
    ))
}

fn c8_chain() -> Outcome {
    let start = Instant::now();
    let text = std::fs::read_to_string(scenario_path("paper_chain")).unwrap();
    let result = ChainSpec::from_json(&text).unwrap().evaluate().unwrap();
    let out = &result.budget.node;
    check(out.nominal_hz == 495_000_000_000_000, || {
        format!("nominal {}", out.nominal_hz)
    })?;
    let sigma = out.sigma_abs_hz();
    let want = (710f64.powi(2) + 1000f64.powi(2)).sqrt();
    check(
        (sigma - want).abs() <= 10.0 && (sigma - 1230.0).abs() <= 10.0,
        || format!("sigma {sigma} Hz"),
    )?;
    let b = afc_budget(out, &result.budget.afc).unwrap();
    check(b.stability_pass && b.offset_pass, || {
        "AFC budget fails".into()
    })?;

    let comb = CombModel::new(107_000_000, 20_000_000, ReferenceNoise::default()).unwrap();
    let base = 20_000_000 + 1_850_467 * 107_000_000u64;
    let chunks = Exec::default().map(107, |c| {
        let mut worst = 0u64;
        for k in (c as u64 * 1_000_000)..((c as u64 + 1) * 1_000_000) {
            let beat = comb_beat(base + k, &comb).unwrap();
            let r = k % 107_000_000;
            let nearest = r.min(107_000_000 - r);
            if beat.beat_hz != nearest || 2 * beat.beat_hz > 107_000_000 {
                return Err(format!("offset {k}: beat {}", beat.beat_hz));
            }
            worst = worst.max(beat.beat_hz);
        }
        Ok(worst)
    });
    let mut worst = 0;
    for c in chunks {
        worst = worst.max(c?);
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "495 THz exact, σ = {:.4} kHz, margin ×{:.0}, max beat {worst} Hz over 107e6 steps",
        sigma / 1e3,
        b.afc.stability_target_hz / sigma
    ))
}

fn c9_agreement() -> Outcome {
    let cfg = load_scenario("fig4_crosscheck_1010");
    let setup = build_lock_setup(&cfg, "lock1010").unwrap();
    let (dur, dt, seed) = (cfg.duration_s, cfg.dt_s, 9);
    let td = simulate_lock(&setup, dur, dt, seed).unwrap();
    let sp = spectral_lock_run(&setup, dur, dt, seed).unwrap();
    let ratio_in = adev1(&sp.inloop_beat_trace, 1.0) / adev1(&td.inloop_beat_trace, 1.0);
    let ratio_lk = adev1(&sp.laser_offset_trace, 1.0) / adev1(&td.laser_offset_trace, 1.0);

    let mut quiet = setup.clone();
    quiet.discriminator.detection_noise_v_rthz = 0.0;
    let td_q = simulate_lock(&quiet, dur, dt, seed).unwrap();
    let bw = quiet.bandwidth_hz().unwrap();
    let sl = spectral_lock(&quiet.laser, &quiet.reference, bw, dur, dt, seed).unwrap();
    let ratio_q = adev1(&sl, 1.0) / adev1(&td_q.laser_offset_trace, 1.0);
    for (what, r) in [
        ("in-loop", ratio_in),
        ("locked", ratio_lk),
        ("spectral_lock", ratio_q),
    ] {
        check((r - 1.0).abs() <= 0.25, || format!("{what} ADEV ratio {r}"))?;
    }
    Ok(format!(
        "ADEV(1 s) spectral/time-domain: in-loop {ratio_in:.3}, locked {ratio_lk:.3}, spectral_lock {ratio_q:.3}"
    ))
}

fn c10_determinism() -> Outcome {
    let mut files = 0;
    for name in GOLDENS {
        let (a, da) = run_golden(name);
        let (b, db) = run_golden(name);
        check(a.manifest == b.manifest, || {
            format!("{name}: manifests differ")
        })?;
        check(a.statistics == b.statistics, || {
            format!("{name}: statistics differ")
        })?;
        for f in a.manifest.iter().filter(|f| f.ends_with(".csv")) {
            let x = std::fs::read(da.path().join(name).join(f)).unwrap();
            let y = std::fs::read(db.path().join(name).join(f)).unwrap();
            check(x == y, || format!("{name}/{f} differs"))?;
            files += 1;
        }
    }
    Ok(format!(
        "{files} CSV artifacts byte-identical across reruns"
    ))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("ADEV oracle equivalence", c1_adev_oracle),
        ("white-FM law", c2_white_fm),
        ("drift law", c3_drift),
        ("discriminator analytics", c4_discriminator),
        ("1514 nm free-run/lock reproduction", c5_fig3),
        ("1010 nm in-loop reproduction", c6_fig4),
        ("thermal lock-point drift", c7_thermal),
        ("chain budget", c8_chain),
        ("time-domain vs spectral agreement", c9_agreement),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!(
                "criterion {:>2} PASS  {name}: {detail} [{secs:.2} s]",
                i + 1
            ),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.2} s]", i + 1);
            }
        }
    }
    println!("{}/10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
