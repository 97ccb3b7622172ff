//! Digital twin of a delay-line offset-locking chain: power-law oscillator
//! noise, the discriminator and PI servo, frequency counting and Allan
//! statistics, optical frequency-chain budgeting, and a scenario runner.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod error;
pub mod exec;
pub mod lockloop;
pub mod metrology;
pub mod noisegen;
pub mod scenario;
pub mod trace;

pub use error::{ConfigIssue, Error, IssueKind, Result};
pub use exec::Exec;
pub use trace::FrequencyTrace;
