mod common;

use common::white_fm_adev;
use ols_core::lockloop::*;
use ols_core::metrology::{adev_overlapping, count, CounterConfig};
use ols_core::noisegen::{NoiseSpec, OscillatorModel};
use ols_core::{Error, Exec};

const REF_HZ: u64 = 200_000_000_000_000;
const DELAY: f64 = 25e-9;

fn disc() -> DiscriminatorConfig {
    DiscriminatorConfig::banded(DELAY, 1.0, 30e6, 30e6).unwrap()
}

/// Noiseless laser `offset_hz` away from the 30 MHz lock point.
fn setup(offset_hz: i64) -> LockSetup {
    let d = disc();
    let slope = discriminator_slope(&d, 30e6).unwrap();
    LockSetup {
        laser: OscillatorModel::ideal((REF_HZ as i64 + 30_000_000 + offset_hz) as u64).unwrap(),
        reference: OscillatorModel::ideal(REF_HZ).unwrap(),
        discriminator: d,
        servo: ServoConfig::for_bandwidth(100.0, slope, 50e6, 1e-4).unwrap(),
        f_lock_hz: 30e6,
        thermal: None,
    }
}

#[test]
fn fixed_point_keeps_every_trace_constant() {
    let run = simulate_lock(&setup(0), 0.5, 1e-4, 1).unwrap();
    assert_eq!(run.status, LockStatus::Locked);
    assert!(run.inloop_beat_trace.samples.iter().all(|&b| b == 0.0));
    assert!(run.laser_offset_trace.samples.iter().all(|&b| b == 0.0));
    assert!(run.actuator_trace.iter().all(|&a| a == 0.0));
    assert!(run.error_trace.iter().all(|&e| e.abs() < 1e-9));
    assert!(run.lock_flag.iter().all(|&f| f));
    assert!(run.thermal_lockpoint_trace.iter().all(|&f| f == 30e6));
    assert_eq!(run.lock_fraction, 1.0);
}

#[test]
fn offset_inside_capture_converges() {
    let run = simulate_lock(&setup(5_000_000), 0.2, 1e-4, 1).unwrap();
    assert_eq!(run.status, LockStatus::Locked);
    let last = *run.inloop_beat_trace.samples.last().unwrap();
    assert!(last.abs() < 1.0, "final beat offset {last} Hz");
    assert!(run.lock_flag.iter().all(|&f| f));
}

#[test]
fn offset_outside_capture_never_locks() {
    for off in [15_000_000, -15_000_000] {
        let run = simulate_lock(&setup(off), 0.2, 1e-4, 1).unwrap();
        assert_eq!(run.status, LockStatus::NeverLocked);
        assert!(run.lock_flag.iter().all(|&f| !f));
        assert!(run.actuator_trace.iter().all(|&a| a == 0.0));
    }
}

#[test]
fn negative_beat_and_negative_sign_still_lock() {
    let mut s = setup(0);
    s.laser = OscillatorModel::ideal(REF_HZ - 30_000_000 - 4_000_000).unwrap();
    let run = simulate_lock(&s, 0.2, 1e-4, 1).unwrap();
    assert!(run.inloop_beat_trace.samples.last().unwrap().abs() < 1.0);

    let mut s = setup(4_000_000);
    s.discriminator = s.discriminator.with_sign(-1).unwrap();
    let run = simulate_lock(&s, 0.2, 1e-4, 1).unwrap();
    assert!(run.inloop_beat_trace.samples.last().unwrap().abs() < 1.0);
}

#[test]
fn basin_matches_quarter_delay_prediction() {
    let s = setup(0);
    let h = capture_halfwidth(&s.discriminator);
    let offsets: Vec<i64> = (-10..=10)
        .map(|k| (k as f64 * 0.23 * h).round() as i64)
        .collect();
    let got = basin_scan(&s, &offsets, 0.2, 1e-4, Exec::default()).unwrap();
    for (&off, &ok) in offsets.iter().zip(&got) {
        assert_eq!(ok, (off as f64).abs() < h, "offset {off}");
    }
    let seq = basin_scan(&s, &offsets, 0.2, 1e-4, Exec::Sequential).unwrap();
    assert_eq!(got, seq);
}

#[test]
fn railed_actuator_is_reported_unstable() {
    let mut s = setup(0);
    s.laser = OscillatorModel::new(s.laser.nominal_hz, NoiseSpec::zero().with_drift(2e6)).unwrap();
    s.servo.actuator_limit_hz = 1e3;
    let run = simulate_lock(&s, 2.0, 1e-4, 1).unwrap();
    assert_eq!(run.status, LockStatus::Unstable);
    assert!(run.rail_fraction > 0.5);
}

#[test]
fn timing_and_guard_errors() {
    let s = setup(0);
    assert!(matches!(
        simulate_lock(&s, 1.0, 2e-4, 1),
        Err(Error::Timing(_))
    ));
    assert!(matches!(
        simulate_lock(&s, 1.0, 0.3e-4, 1),
        Err(Error::Timing(_))
    ));
    assert!(simulate_lock(&s, 1.0, 0.0, 1).is_err());

    let mut fast = s.clone();
    fast.servo.ki *= 20.0;
    assert!(matches!(
        simulate_lock(&fast, 0.1, 1e-4, 1),
        Err(Error::Parameter(_))
    ));

    let mut off = s.clone();
    off.f_lock_hz = 25e6;
    assert!(simulate_lock(&off, 0.1, 1e-4, 1).is_err());
}

#[test]
fn thermal_ramp_is_tracked() {
    let mut s = setup(0);
    s.thermal = Some(
        ThermalModel::new(
            1.7e-4,
            TemperatureProfile::Ramp {
                delta_k: 2.0,
                over_s: 2.0,
            },
        )
        .unwrap(),
    );
    let run = simulate_lock(&s, 3.0, 1e-4, 1).unwrap();
    let nominal = run.inloop_beat_trace.nominal_hz as f64;
    let drift = run.inloop_beat_trace.samples.last().unwrap() + nominal - 30e6;
    assert!((drift / -10.2e3 - 1.0).abs() < 0.05, "drift {drift} Hz");
    for (b, lp) in run
        .inloop_beat_trace
        .samples
        .iter()
        .zip(&run.thermal_lockpoint_trace)
    {
        assert!((b + nominal - lp).abs() < 10.0);
    }
}

#[test]
fn spectral_lock_of_silent_oscillators_is_zero() {
    let a = OscillatorModel::ideal(REF_HZ).unwrap();
    let t = spectral_lock(&a, &a, 100.0, 10.0, 1e-3, 3).unwrap();
    assert!(t.samples.iter().all(|&x| x == 0.0));
}

#[test]
fn spectral_bandwidth_above_nyquist_is_rejected() {
    let a = OscillatorModel::ideal(REF_HZ).unwrap();
    assert!(spectral_lock(&a, &a, 600.0, 10.0, 1e-3, 3).is_err());
}

#[test]
fn spectral_loop_suppresses_slow_white_noise() {
    let h0 = 1e4;
    let laser = OscillatorModel::new(REF_HZ, NoiseSpec::white(h0)).unwrap();
    let quiet = OscillatorModel::ideal(REF_HZ).unwrap();
    let mut ratio = 0.0;
    for seed in 0..5 {
        let t = spectral_lock(&laser, &quiet, 20.0, 512.0, 1e-2, seed).unwrap();
        let c = count(&t, &CounterConfig::new(1.0)).unwrap();
        let locked = adev_overlapping(&c, &[16.0]).unwrap().points[0].sigma;
        ratio += white_fm_adev(h0, 16.0) / locked / 5.0;
    }
    assert!(ratio > 10.0, "suppression at 16 s only {ratio}");
}

#[test]
fn inloop_is_quieter_than_free_run_at_every_tau() {
    let mut s = setup(0);
    s.laser = OscillatorModel::new(
        s.laser.nominal_hz,
        NoiseSpec::white(1e4).with_random_walk(1e6),
    )
    .unwrap();
    s.reference =
        OscillatorModel::with_profile(REF_HZ, vec![(1.0, 2e-12), (100.0, 1e-12)]).unwrap();
    let run = spectral_lock_run(&s, 600.0, 4e-3, 8).unwrap();
    let taus = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
    let gate = CounterConfig::new(1.0);
    let inloop = adev_overlapping(&count(&run.inloop_beat_trace, &gate).unwrap(), &taus).unwrap();
    let free = adev_overlapping(&count(&run.free_run_beat(), &gate).unwrap(), &taus).unwrap();
    for (a, b) in inloop.points.iter().zip(&free.points) {
        assert!(
            a.sigma <= b.sigma,
            "tau {}: {} > {}",
            a.tau_s,
            a.sigma,
            b.sigma
        );
    }
}

#[test]
fn time_domain_and_spectral_agree() {
    let mut s = setup(0);
    s.laser = OscillatorModel::new(
        s.laser.nominal_hz,
        NoiseSpec::white(4e3).with_random_walk(4e5),
    )
    .unwrap();
    s.reference = OscillatorModel::with_profile(REF_HZ, vec![(1.0, 1e-12), (10.0, 4e-13)]).unwrap();
    let td = simulate_lock(&s, 20.0, 1e-4, 5).unwrap();
    let sp = spectral_lock_run(&s, 20.0, 1e-4, 5).unwrap();
    let gate = CounterConfig::new(1.0);
    let a = |t: &ols_core::FrequencyTrace| {
        adev_overlapping(&count(t, &gate).unwrap(), &[1.0])
            .unwrap()
            .points[0]
            .sigma
    };
    let r = a(&sp.laser_offset_trace) / a(&td.laser_offset_trace);
    assert!((r - 1.0).abs() < 0.25, "locked ratio {r}");
    let r = a(&sp.inloop_beat_trace) / a(&td.inloop_beat_trace);
    assert!((r - 1.0).abs() < 0.25, "in-loop ratio {r}");
}

#[test]
fn runs_are_deterministic() {
    let mut s = setup(0);
    s.laser = OscillatorModel::new(s.laser.nominal_hz, NoiseSpec::white(1e3)).unwrap();
    let a = simulate_lock(&s, 0.5, 1e-4, 42).unwrap();
    let b = simulate_lock(&s, 0.5, 1e-4, 42).unwrap();
    assert_eq!(a, b);
    let c = run_lock(&s, Fidelity::Spectral, 0.5, 1e-4, 42).unwrap();
    let d = run_lock(&s, Fidelity::Spectral, 0.5, 1e-4, 42).unwrap();
    assert_eq!(c, d);
}

#[test]
fn out_of_loop_against_ideal_is_identity() {
    let mut s = setup(0);
    s.laser = OscillatorModel::new(s.laser.nominal_hz, NoiseSpec::white(1e3)).unwrap();
    let run = simulate_lock(&s, 0.2, 1e-4, 2).unwrap();
    let locked = &run.laser_offset_trace;
    let ideal =
        ols_core::FrequencyTrace::new(REF_HZ, locked.dt, vec![0.0; locked.len()], 9).unwrap();
    let beat = out_of_loop_beat(locked, &ideal).unwrap();
    assert_eq!(beat.samples, locked.samples);
    assert_eq!(beat.nominal_hz, locked.nominal_hz - REF_HZ);
    let own = out_of_loop_beat(locked, locked).unwrap();
    assert!(own.samples.iter().all(|&x| x == 0.0));
    let short = ols_core::FrequencyTrace::new(REF_HZ, locked.dt, vec![0.0; 3], 9).unwrap();
    assert!(out_of_loop_beat(locked, &short).is_err());
}

#[test]
fn traces_share_length() {
    let run = simulate_lock(&setup(3_000_000), 0.1, 1e-4, 1).unwrap();
    let n = run.inloop_beat_trace.len();
    assert_eq!(run.laser_offset_trace.len(), n);
    assert_eq!(run.free_run_trace.len(), n);
    assert_eq!(run.reference_trace.len(), n);
    assert_eq!(run.error_trace.len(), n);
    assert_eq!(run.actuator_trace.len(), n);
    assert_eq!(run.lock_flag.len(), n);
    assert_eq!(run.thermal_lockpoint_trace.len(), n);
}

#[test]
fn write_dir_emits_csvs_and_summary() {
    let s = setup(2_000_000);
    let run = simulate_lock(&s, 0.05, 1e-4, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = run.write_dir(dir.path(), &s).unwrap();
    for f in &files {
        assert!(f.exists(), "{f:?}");
    }
    let names: Vec<String> = files
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"inloop_beat.csv".to_string()));
    assert!(names.contains(&"lockrun.json".to_string()));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("lockrun.json")).unwrap())
            .unwrap();
    assert_eq!(json["status"], "locked");
    assert_eq!(json["samples"], 500);
    assert!(json["config"]["discriminator"]["delay_s"].is_number());
    let beat = std::fs::File::open(dir.path().join("inloop_beat.csv")).unwrap();
    let back = ols_core::FrequencyTrace::read_csv(std::io::BufReader::new(beat)).unwrap();
    assert_eq!(back, run.inloop_beat_trace);
}
