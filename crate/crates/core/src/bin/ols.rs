use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

use ols_core::chain::ChainSpec;
use ols_core::lockloop::Fidelity;
use ols_core::metrology::{
    adev_nonoverlapping, adev_overlapping, octave_taus, to_fractional, CounterSeries,
};
use ols_core::noisegen::{synth_power_law, NoiseSpec};
use ols_core::scenario::{
    compare_expected, expand_seeds, output_root, run_lock_block, run_many, run_scenario,
    validate_config, RunReport,
};
use ols_core::{Error, Exec, Result};

#[derive(Parser)]
#[command(
    name = "ols",
    version,
    about = "Offset-lock simulation and frequency metrology"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FidelityArg {
    TimeDomain,
    Spectral,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a trace CSV from a NoiseSpec JSON file.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        duration: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        nominal_hz: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run one lock block of a scenario and write its LockRun directory.
    Lock {
        config: PathBuf,
        #[arg(long)]
        lock: Option<String>,
        #[arg(long, value_enum)]
        fidelity: Option<FidelityArg>,
    },
    /// Allan deviation of a counter series CSV.
    #[command(group(ArgGroup::new("estimator").args(["overlapping", "nonoverlapping"])))]
    Adev {
        counts: PathBuf,
        /// Comma-separated τ values in seconds; octave grid when omitted.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long)]
        overlapping: bool,
        #[arg(long)]
        nonoverlapping: bool,
        /// Report fractional deviation relative to this nominal, Hz.
        #[arg(long, value_name = "NOMINAL_HZ")]
        fractional: Option<u64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a chain JSON and print its budget report.
    Chain {
        chain: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a full scenario.
    Run {
        config: PathBuf,
        /// Expand into N runs with consecutive seeds.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Check a report's statistics against its expectations.
    Compare { report: PathBuf },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn emit(output: Option<&Path>, body: &[u8]) -> Result<()> {
    match output {
        Some(p) => fs::write(p, body).map_err(|source| Error::Output {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            io::stdout().write_all(body)?;
            Ok(())
        }
    }
}

fn exec(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Synth {
            spec,
            duration,
            dt,
            seed,
            nominal_hz,
            output,
        } => {
            let text = read(&spec)?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let spec: NoiseSpec = serde_path_to_error::deserialize(de)
                .map_err(|e| Error::Parse(format!("{}: {}", e.path(), e.inner())))?;
            let mut trace = synth_power_law(&spec, duration, dt, seed)?;
            trace.nominal_hz = nominal_hz;
            let mut buf = Vec::new();
            trace.write_csv(&mut buf)?;
            emit(output.as_deref(), &buf)?;
            Ok(0)
        }
        Cmd::Lock {
            config,
            lock,
            fidelity,
        } => {
            let cfg = validate_config(&read(&config)?)?;
            let name = match lock {
                Some(l) => l,
                None => cfg
                    .locks
                    .keys()
                    .next()
                    .cloned()
                    .ok_or_else(|| Error::Parameter("scenario has no lock blocks".into()))?,
            };
            let fid = fidelity.map(|f| match f {
                FidelityArg::TimeDomain => Fidelity::TimeDomain,
                FidelityArg::Spectral => Fidelity::Spectral,
            });
            let (run, dir) = run_lock_block(&cfg, &name, fid, &output_root())?;
            eprintln!("wrote {}", dir.display());
            println!(
                "{}",
                serde_json::json!({
                    "lock": name,
                    "status": run.status,
                    "lock_fraction": run.lock_fraction,
                    "rail_fraction": run.rail_fraction,
                    "directory": dir,
                })
            );
            Ok(0)
        }
        Cmd::Adev {
            counts,
            taus,
            nonoverlapping,
            fractional,
            output,
            ..
        } => {
            let file = fs::File::open(&counts)
                .map_err(|e| Error::Parse(format!("{}: {e}", counts.display())))?;
            let series = CounterSeries::read_csv(BufReader::new(file))?;
            let taus = taus.unwrap_or_else(|| octave_taus(&series));
            let mut result = if nonoverlapping {
                adev_nonoverlapping(&series, &taus)?
            } else {
                adev_overlapping(&series, &taus)?
            };
            if let Some(nominal) = fractional {
                result = to_fractional(&result, nominal)?;
            }
            for t in &result.omitted_taus {
                eprintln!("warning: tau {t} s omitted, record too short");
            }
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            emit(output.as_deref(), &buf)?;
            Ok(0)
        }
        Cmd::Chain { chain, output } => {
            let spec = ChainSpec::from_json(&read(&chain)?)?;
            let result = spec.evaluate()?;
            let mut text = serde_json::to_string_pretty(&result.budget)?;
            text.push('\n');
            emit(output.as_deref(), text.as_bytes())?;
            Ok(if result.budget.pass { 0 } else { 1 })
        }
        Cmd::Run { config, seeds } => {
            let cfg = validate_config(&read(&config)?)?;
            let reports = match seeds {
                None => vec![run_scenario(&cfg)],
                Some(n) => run_many(&expand_seeds(&cfg, n), &output_root(), Exec::default()),
            };
            let mut code = 0;
            for r in reports {
                let r = r?;
                let cmp = compare_expected(&r);
                println!("{}", serde_json::to_string(&cmp)?);
                code = code.max(cmp.exit_code());
            }
            Ok(code)
        }
        Cmd::Compare { report } => {
            let text = read(&report)?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let report: RunReport = serde_path_to_error::deserialize(de)
                .map_err(|e| Error::Parse(format!("{}: {}", e.path(), e.inner())))?;
            let cmp = compare_expected(&report);
            println!("{}", serde_json::to_string_pretty(&cmp)?);
            Ok(cmp.exit_code())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            match &e {
                Error::Config(issues) => {
                    eprintln!("error: invalid configuration");
                    for i in issues {
                        eprintln!(
                            "  [{}] {i}",
                            serde_json::to_string(&i.kind).unwrap_or_default()
                        );
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
