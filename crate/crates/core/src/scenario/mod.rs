//! Named, reproducible experiments: configs in JSON, artifacts on disk, and
//! envelope checks on the resulting statistics.
//!
//! Statistic names are dotted paths such as `lock1010.inloop.adev_frac@1` or
//! `lock1514.freerun.pp_hz@3600`; signals of a lock are `freerun`, `inloop`,
//! `locked` and `outofloop`.

mod config;
mod run;

pub use config::{
    build_lock_setup, check_config, ideal_oscillator, out_of_loop_reference, stat_tau,
    validate_config, ChainBlock, FidelityChoice, LaserDef, LockBlock, Measurements, OscillatorDef,
    ScenarioConfig, ServoBlock,
};
pub use run::{
    compare_expected, evaluate_envelopes, expand_seeds, output_root, run_lock_block, run_many,
    run_scenario, run_scenario_in, Comparison, RunReport, Verdict, OUT_DIR_ENV,
};
