use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{build_lock_setup, check_config, out_of_loop_reference, ScenarioConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lockloop::{out_of_loop_beat, run_lock, write_file, Fidelity, LockRun, LockSetup};
use crate::metrology::{
    adev_overlapping, count, octave_taus, peak_to_peak, to_fractional, AllanResult, CounterConfig,
    CounterMode,
};
use crate::trace::{derive_seed, FrequencyTrace};

pub const OUT_DIR_ENV: &str = "OLS_OUT_DIR";

const STREAM_OSCILLATOR: u64 = 1000;
const STREAM_LOCK: u64 = 100;
const STREAM_OUT_OF_LOOP: u64 = 4;

/// Output root: `$OLS_OUT_DIR`, else `./ols_out`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("ols_out"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub statistic: String,
    pub value: Option<f64>,
    pub min: f64,
    pub max: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub statistics: BTreeMap<String, f64>,
    pub verdicts: Vec<Verdict>,
    /// No expectations were declared, so the pass is vacuous.
    pub unchecked: bool,
    pub pass: bool,
    /// Paths relative to the run directory, report included.
    pub manifest: Vec<String>,
    pub warnings: Vec<String>,
    pub config: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<serde_json::Value>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub name: String,
    pub pass: bool,
    pub unchecked: bool,
    pub failing: Vec<String>,
    pub verdicts: Vec<Verdict>,
}

impl Comparison {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// Closed-interval envelope checks, one verdict per expectation.
pub fn evaluate_envelopes(
    expectations: &BTreeMap<String, [f64; 2]>,
    stats: &BTreeMap<String, f64>,
) -> Vec<Verdict> {
    expectations
        .iter()
        .map(|(name, &[min, max])| {
            let value = stats.get(name).copied();
            Verdict {
                statistic: name.clone(),
                value,
                min,
                max,
                pass: value.is_some_and(|v| min <= v && v <= max),
            }
        })
        .collect()
}

/// Re-checks a report's statistics against its own expectations.
pub fn compare_expected(report: &RunReport) -> Comparison {
    let verdicts = evaluate_envelopes(&report.config.expectations, &report.statistics);
    let failing: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| v.statistic.clone())
        .collect();
    Comparison {
        name: report.name.clone(),
        pass: failing.is_empty(),
        unchecked: verdicts.is_empty(),
        failing,
        verdicts,
    }
}

/// `n` copies of `cfg` with consecutive seeds and distinct names.
pub fn expand_seeds(cfg: &ScenarioConfig, n: u64) -> Vec<ScenarioConfig> {
    (0..n)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i);
            c.name = format!("{}_seed{}", cfg.name, c.seed);
            c
        })
        .collect()
}

/// Runs independent scenarios, each in its own directory under `root`.
pub fn run_many(cfgs: &[ScenarioConfig], root: &Path, exec: Exec) -> Vec<Result<RunReport>> {
    exec.map_slice(cfgs, |c| run_scenario_in(c, root))
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport> {
    run_scenario_in(cfg, &output_root())
}

struct Artifacts {
    dir: PathBuf,
    manifest: Vec<String>,
}

impl Artifacts {
    fn write<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut std::io::BufWriter<fs::File>) -> Result<()>,
    {
        write_file(&self.dir.join(name), f)?;
        self.manifest.push(name.to_string());
        Ok(())
    }
}

struct Stats {
    values: BTreeMap<String, f64>,
    warnings: Vec<String>,
}

impl Stats {
    fn put(&mut self, name: String, v: f64) {
        if v.is_finite() {
            self.values.insert(name, v);
        } else {
            self.warnings
                .push(format!("{name} is not finite and was dropped"));
        }
    }
}

struct Ctx<'a> {
    cfg: &'a ScenarioConfig,
    counter: CounterConfig,
    out: Artifacts,
    stats: Stats,
}

impl Ctx<'_> {
    /// Counts a trace, writes counts and ADEV, and records pp and ADEV
    /// statistics under `prefix`. Fractional values use `frac_nominal`.
    fn measure(
        &mut self,
        prefix: &str,
        trace: &FrequencyTrace,
        frac_nominal: u64,
    ) -> Result<AllanResult> {
        let series = count(trace, &self.counter)?;
        self.out
            .write(&format!("{prefix}.counts.csv"), |w| series.write_csv(w))?;
        let taus = match &self.cfg.measurements.taus {
            Some(t) => t.clone(),
            None => octave_taus(&series),
        };
        let adev = adev_overlapping(&series, &taus)?;
        for t in &adev.omitted_taus {
            self.stats
                .warnings
                .push(format!("{prefix}: tau {t} s omitted, record too short"));
        }
        self.out
            .write(&format!("{prefix}.adev.csv"), |w| adev.write_csv(w))?;
        self.stats
            .put(format!("{prefix}.pp_hz"), peak_to_peak(&series, None)?);
        for w in &self.cfg.measurements.pp_windows_s {
            self.stats.put(
                format!("{prefix}.pp_hz@{w}"),
                peak_to_peak(&series, Some(*w))?,
            );
        }
        let frac = to_fractional(&adev, frac_nominal)?;
        for (p, f) in adev.points.iter().zip(&frac.points) {
            self.stats
                .put(format!("{prefix}.adev_hz@{}", p.tau_s), p.sigma);
            self.stats
                .put(format!("{prefix}.adev_frac@{}", p.tau_s), f.sigma);
        }
        Ok(adev)
    }

    fn measure_lock(
        &mut self,
        prefix: &str,
        setup: &LockSetup,
        run: &LockRun,
        ool_ref: Option<&FrequencyTrace>,
    ) -> Result<BTreeMap<&'static str, AllanResult>> {
        let nominal = setup.laser.nominal_hz;
        let mut out = BTreeMap::new();
        out.insert(
            "freerun",
            self.measure(&format!("{prefix}.freerun"), &run.free_run_beat(), nominal)?,
        );
        out.insert(
            "inloop",
            self.measure(&format!("{prefix}.inloop"), &run.inloop_beat_trace, nominal)?,
        );
        out.insert(
            "locked",
            self.measure(
                &format!("{prefix}.locked"),
                &run.laser_offset_trace,
                nominal,
            )?,
        );
        if let Some(r) = ool_ref {
            let beat = out_of_loop_beat(&run.laser_offset_trace, r)?;
            out.insert(
                "outofloop",
                self.measure(&format!("{prefix}.outofloop"), &beat, nominal)?,
            );
        }
        let s = &mut self.stats;
        s.put(format!("{prefix}.lock_fraction"), run.lock_fraction);
        s.put(format!("{prefix}.rail_fraction"), run.rail_fraction);
        s.put(format!("{prefix}.bandwidth_hz"), run.bandwidth_hz);
        s.put(format!("{prefix}.f_lock_hz"), setup.f_lock_hz);
        s.put(format!("{prefix}.mean_beat_hz"), run.mean_beat_hz());
        s.put(
            format!("{prefix}.locked"),
            if run.status == crate::lockloop::LockStatus::Locked {
                1.0
            } else {
                0.0
            },
        );
        let lp = &run.thermal_lockpoint_trace;
        s.put(
            format!("{prefix}.thermal_shift_hz"),
            lp[lp.len() - 1] - lp[0],
        );
        let hi = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = lp.iter().cloned().fold(f64::INFINITY, f64::min);
        s.put(format!("{prefix}.thermal_swing_hz"), hi - lo);
        let (free, locked) = (
            s.values.get(&format!("{prefix}.freerun.pp_hz")).copied(),
            s.values.get(&format!("{prefix}.locked.pp_hz")).copied(),
        );
        if let (Some(f), Some(l)) = (free, locked) {
            if l > 0.0 {
                s.put(format!("{prefix}.suppression"), f / l);
            }
        }
        Ok(out)
    }
}

/// Synthesis → lock → count → statistics → chain budget, with every artifact
/// written under `root/<name>/`.
pub fn run_scenario_in(cfg: &ScenarioConfig, root: &Path) -> Result<RunReport> {
    let start = Instant::now();
    check_config(cfg)?;
    let dir = root.join(&cfg.name);
    fs::create_dir_all(&dir).map_err(|source| Error::Output {
        path: dir.clone(),
        source,
    })?;
    let m = &cfg.measurements;
    let mut ctx = Ctx {
        cfg,
        counter: CounterConfig {
            gate_s: m.gate_s,
            dead_time_s: m.dead_time_s,
            mode: CounterMode::Pi,
        },
        out: Artifacts {
            dir: dir.clone(),
            manifest: Vec::new(),
        },
        stats: Stats {
            values: BTreeMap::new(),
            warnings: Vec::new(),
        },
    };

    for (i, name) in m.oscillators.iter().enumerate() {
        let model = cfg.oscillators[name].model()?;
        let seed = derive_seed(cfg.seed, STREAM_OSCILLATOR + i as u64);
        let trace = model.synthesize(cfg.duration_s, cfg.dt_s, seed)?;
        ctx.measure(name, &trace, model.nominal_hz)?;
    }

    for (i, name) in cfg.locks.keys().enumerate() {
        let block = &cfg.locks[name];
        let setup = build_lock_setup(cfg, name)?;
        let seed = derive_seed(cfg.seed, STREAM_LOCK + i as u64);
        let ool_ref = match out_of_loop_reference(cfg, name, setup.laser.nominal_hz)? {
            Some(model) => Some(model.synthesize(
                cfg.duration_s,
                cfg.dt_s,
                derive_seed(seed, STREAM_OUT_OF_LOOP),
            )?),
            None => None,
        };
        let mut primary: Option<BTreeMap<&str, AllanResult>> = None;
        for (j, &fid) in block.fidelity.runs().iter().enumerate() {
            let run = run_lock(&setup, fid, cfg.duration_s, cfg.dt_s, seed)?;
            let prefix = if j == 0 {
                name.clone()
            } else {
                format!("{name}.{}", fidelity_tag(fid))
            };
            let results = ctx.measure_lock(&prefix, &setup, &run, ool_ref.as_ref())?;
            match &primary {
                None => primary = Some(results),
                Some(base) => {
                    for (signal, base_adev) in base {
                        for p in &base_adev.points {
                            if let Some(other) = results[signal].sigma_at(p.tau_s) {
                                if p.sigma > 0.0 {
                                    ctx.stats.put(
                                        format!("{name}.agreement.{signal}@{}", p.tau_s),
                                        other / p.sigma,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut chain_json = None;
    if let Some(ch) = &cfg.chain {
        let spec = ch.resolve(&ctx.stats.values)?;
        let result = spec.evaluate()?;
        let b = &result.budget;
        let s = &mut ctx.stats;
        s.put("chain.nominal_hz".into(), b.node.nominal_hz as f64);
        s.put("chain.sigma_abs_hz".into(), b.node.sigma_abs_hz());
        s.put("chain.stability_margin_hz".into(), b.margins.stability_hz);
        s.put("chain.offset_margin_hz".into(), b.margins.offset_hz);
        s.put("chain.pass".into(), if b.pass { 1.0 } else { 0.0 });
        let json = serde_json::to_value(&result)?;
        let text = serde_json::to_string_pretty(&json)?;
        ctx.out.write("chain_budget.json", |w| {
            use std::io::Write;
            w.write_all(text.as_bytes())?;
            Ok(())
        })?;
        chain_json = Some(json);
    }

    let Ctx {
        out: mut artifacts,
        stats,
        ..
    } = ctx;
    let verdicts = evaluate_envelopes(&cfg.expectations, &stats.values);
    artifacts.manifest.push("report.json".into());
    let mut report = RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        unchecked: verdicts.is_empty(),
        pass: verdicts.iter().all(|v| v.pass),
        verdicts,
        statistics: stats.values,
        manifest: artifacts.manifest,
        warnings: stats.warnings,
        config: cfg.clone(),
        chain: chain_json,
        wall_time_s: 0.0,
    };
    report.wall_time_s = start.elapsed().as_secs_f64();
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(&path, text).map_err(|source| Error::Output { path, source })?;
    Ok(report)
}

fn fidelity_tag(f: Fidelity) -> &'static str {
    match f {
        Fidelity::TimeDomain => "timedomain",
        Fidelity::Spectral => "spectral",
    }
}

/// Runs one lock block alone and writes its full [`LockRun`] directory.
pub fn run_lock_block(
    cfg: &ScenarioConfig,
    lock: &str,
    fidelity: Option<Fidelity>,
    root: &Path,
) -> Result<(LockRun, PathBuf)> {
    check_config(cfg)?;
    let setup = build_lock_setup(cfg, lock)?;
    let idx = cfg.locks.keys().position(|k| k == lock).unwrap_or(0);
    let fid = fidelity.unwrap_or(cfg.locks[lock].fidelity.runs()[0]);
    let run = run_lock(
        &setup,
        fid,
        cfg.duration_s,
        cfg.dt_s,
        derive_seed(cfg.seed, STREAM_LOCK + idx as u64),
    )?;
    let dir = root.join(&cfg.name).join(format!("lockrun_{lock}"));
    run.write_dir(&dir, &setup)?;
    Ok((run, dir))
}
