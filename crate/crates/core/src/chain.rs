//! Optical frequency bookkeeping through SHG, PDC, SFG and AOM stages, and
//! the AFC acceptance budget.
//!
//! Nominal frequencies are integers and never pass through floating point.
//! Instability is carried per source label: shares of the same source add
//! linearly (fully correlated), different sources add in quadrature.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::noisegen::CombModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "NodeJson")]
pub struct ChainNode {
    pub nominal_hz: u64,
    pub offset_hz: f64,
    /// Averaging time the instability refers to.
    pub tau_s: f64,
    /// Signed instability share of each source, Hz.
    pub contributions: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct NodeJson {
    nominal_hz: u64,
    sigma_abs_hz: f64,
    offset_hz: f64,
    tau_s: f64,
    provenance: Vec<String>,
    contributions: BTreeMap<String, f64>,
}

impl From<ChainNode> for NodeJson {
    fn from(n: ChainNode) -> Self {
        NodeJson {
            nominal_hz: n.nominal_hz,
            sigma_abs_hz: n.sigma_abs_hz(),
            offset_hz: n.offset_hz,
            tau_s: n.tau_s,
            provenance: n.provenance(),
            contributions: n.contributions,
        }
    }
}

impl ChainNode {
    pub fn source(label: &str, nominal_hz: u64, sigma_abs_hz: f64, tau_s: f64) -> Result<Self> {
        Self::with_contributions(
            nominal_hz,
            tau_s,
            BTreeMap::from([(label.to_string(), sigma_abs_hz)]),
        )
    }

    /// A source whose instability is split over several labels, e.g. a
    /// common-mode reference share and a private laser residual.
    pub fn with_contributions(
        nominal_hz: u64,
        tau_s: f64,
        contributions: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if nominal_hz == 0 {
            return param("chain node nominal must be > 0");
        }
        if !(tau_s > 0.0) {
            return param(format!("chain node tau must be > 0, got {tau_s}"));
        }
        if contributions
            .values()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return param("chain node sigma must be finite and >= 0");
        }
        Ok(Self {
            nominal_hz,
            offset_hz: 0.0,
            tau_s,
            contributions,
        })
    }

    pub fn with_offset(mut self, offset_hz: f64) -> Self {
        self.offset_hz = offset_hz;
        self
    }

    pub fn sigma_abs_hz(&self) -> f64 {
        self.contributions
            .values()
            .map(|c| c * c)
            .sum::<f64>()
            .sqrt()
    }

    pub fn provenance(&self) -> Vec<String> {
        self.contributions.keys().cloned().collect()
    }

    pub fn frequency_hz(&self) -> f64 {
        self.nominal_hz as f64 + self.offset_hz
    }

    fn scaled(&self, nominal_hz: u64, k: f64) -> ChainNode {
        ChainNode {
            nominal_hz,
            offset_hz: self.offset_hz * k,
            tau_s: self.tau_s,
            contributions: self
                .contributions
                .iter()
                .map(|(l, c)| (l.clone(), c * k))
                .collect(),
        }
    }

    fn is_quiet(&self) -> bool {
        self.contributions.values().all(|&c| c == 0.0)
    }
}

pub fn shg(a: &ChainNode) -> Result<ChainNode> {
    let nominal = a
        .nominal_hz
        .checked_mul(2)
        .ok_or_else(|| Error::Parameter("SHG output overflows u64 Hz".into()))?;
    Ok(a.scaled(nominal, 2.0))
}

/// Degenerate down-conversion to `pump/2`.
pub fn pdc_degenerate(pump: &ChainNode) -> Result<ChainNode> {
    if !pump.nominal_hz.is_multiple_of(2) {
        return param(format!(
            "degenerate PDC needs an even pump nominal, got {} Hz (shift the carrier by 1 Hz upstream)",
            pump.nominal_hz
        ));
    }
    Ok(pump.scaled(pump.nominal_hz / 2, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    /// Per source label: shared labels add linearly, distinct ones in quadrature.
    #[default]
    ByProvenance,
    /// Treat the inputs as independent whatever their labels.
    Quadrature,
    /// Treat the inputs as fully correlated.
    Linear,
}

pub fn sfg(a: &ChainNode, b: &ChainNode) -> Result<ChainNode> {
    sfg_with(a, b, Combination::ByProvenance)
}

pub fn sfg_with(a: &ChainNode, b: &ChainNode, mode: Combination) -> Result<ChainNode> {
    let nominal = a
        .nominal_hz
        .checked_add(b.nominal_hz)
        .ok_or_else(|| Error::Parameter("SFG output overflows u64 Hz".into()))?;
    let tau_s = match (a.is_quiet(), b.is_quiet()) {
        (false, false) if (a.tau_s - b.tau_s).abs() > 1e-12 * a.tau_s => {
            return param(format!(
                "cannot combine instabilities at tau {} s and {} s",
                a.tau_s, b.tau_s
            ))
        }
        (true, false) => b.tau_s,
        _ => a.tau_s,
    };
    let contributions = match mode {
        Combination::ByProvenance => {
            let mut c = a.contributions.clone();
            for (l, v) in &b.contributions {
                *c.entry(l.clone()).or_insert(0.0) += v;
            }
            c
        }
        Combination::Quadrature => {
            let mut c: BTreeMap<String, f64> = a
                .contributions
                .iter()
                .map(|(l, v)| (format!("a:{l}"), *v))
                .collect();
            c.extend(b.contributions.iter().map(|(l, v)| (format!("b:{l}"), *v)));
            c
        }
        Combination::Linear => {
            let joint = a.sigma_abs_hz() + b.sigma_abs_hz();
            let labels: BTreeSet<&String> = a
                .contributions
                .keys()
                .chain(b.contributions.keys())
                .collect();
            let name = labels.into_iter().cloned().collect::<Vec<_>>().join("+");
            BTreeMap::from([(name, joint)])
        }
    };
    Ok(ChainNode {
        nominal_hz: nominal,
        offset_hz: a.offset_hz + b.offset_hz,
        tau_s,
        contributions,
    })
}

/// Shifts by `2·f_rf`. The integer part of the shift moves the nominal; a
/// half-hertz remainder (from an odd [`solve_aom`] target) lands in the offset.
pub fn aom_double_pass(a: &ChainNode, f_rf_hz: f64) -> Result<ChainNode> {
    if !f_rf_hz.is_finite() {
        return param("AOM drive frequency must be finite");
    }
    let shift = 2.0 * f_rf_hz;
    let whole = shift.round();
    let nominal = a.nominal_hz as i128 + whole as i128;
    if nominal <= 0 || nominal > u64::MAX as i128 {
        return param(format!(
            "AOM shift of {shift} Hz leaves the valid frequency range"
        ));
    }
    let mut out = a.clone();
    out.nominal_hz = nominal as u64;
    out.offset_hz += shift - whole;
    Ok(out)
}

/// RF drive that brings `current` onto `target_hz` in one double pass.
pub fn solve_aom(target_hz: u64, current: &ChainNode) -> f64 {
    (target_hz as i128 - current.nominal_hz as i128) as f64 / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CombBeat {
    pub line: u64,
    pub beat_hz: u64,
}

/// Nearest comb line to `nu_hz` (ties go to the lower line) and the beat
/// against it.
pub fn comb_beat(nu_hz: u64, comb: &CombModel) -> Result<CombBeat> {
    if comb.f_rep_hz == 0 {
        return param("comb f_rep must be > 0");
    }
    if nu_hz <= comb.f_ceo_hz {
        return param(format!(
            "{nu_hz} Hz lies below the comb offset {} Hz",
            comb.f_ceo_hz
        ));
    }
    let x = nu_hz - comb.f_ceo_hz;
    let n = x / comb.f_rep_hz;
    let r = x % comb.f_rep_hz;
    // r > f_rep/2 without the rounding of an integer halving
    Ok(if 2 * (r as u128) > comb.f_rep_hz as u128 {
        CombBeat {
            line: n + 1,
            beat_hz: comb.f_rep_hz - r,
        }
    } else {
        CombBeat {
            line: n,
            beat_hz: r,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AfcSpec {
    pub center_hz: u64,
    pub width_hz: f64,
    pub stability_target_hz: f64,
}

impl AfcSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.stability_target_hz > 0.0 && self.stability_target_hz < self.width_hz) {
            return param("AFC spec requires 0 < stability_target < width");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Margins {
    /// `target − σ`
    pub stability_hz: f64,
    /// `width/2 − (|mismatch| + σ)`
    pub offset_hz: f64,
    pub center_mismatch_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub node: ChainNode,
    pub afc: AfcSpec,
    pub stability_pass: bool,
    pub offset_pass: bool,
    pub pass: bool,
    pub margins: Margins,
}

pub fn afc_budget(node: &ChainNode, afc: &AfcSpec) -> Result<BudgetReport> {
    afc.validate()?;
    let sigma = node.sigma_abs_hz();
    let mismatch = (node.nominal_hz as i128 - afc.center_hz as i128) as f64 + node.offset_hz;
    let stability_pass = sigma <= afc.stability_target_hz;
    let offset_pass = mismatch.abs() + sigma <= afc.width_hz / 2.0;
    Ok(BudgetReport {
        node: node.clone(),
        afc: afc.clone(),
        stability_pass,
        offset_pass,
        pass: stability_pass && offset_pass,
        margins: Margins {
            stability_hz: afc.stability_target_hz - sigma,
            offset_hz: afc.width_hz / 2.0 - (mismatch.abs() + sigma),
            center_mismatch_hz: mismatch,
        },
    })
}

/// A chain input: one laser or reference, with its instability either as a
/// single figure or split by source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub nominal_hz: u64,
    #[serde(default)]
    pub sigma_abs_hz: Option<f64>,
    #[serde(default)]
    pub contributions: Option<BTreeMap<String, f64>>,
    #[serde(default = "one")]
    pub tau_s: f64,
    #[serde(default)]
    pub offset_hz: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Shg {
        id: String,
        input: String,
    },
    PdcDegenerate {
        id: String,
        input: String,
    },
    Sfg {
        id: String,
        inputs: [String; 2],
        #[serde(default)]
        combination: Combination,
    },
    AomDoublePass {
        id: String,
        input: String,
        f_rf_hz: f64,
    },
    /// Double-pass AOM driven at whatever frequency lands on `target_hz`.
    AomToTarget {
        id: String,
        input: String,
        target_hz: u64,
    },
}

impl Step {
    pub fn id(&self) -> &str {
        match self {
            Step::Shg { id, .. }
            | Step::PdcDegenerate { id, .. }
            | Step::Sfg { id, .. }
            | Step::AomDoublePass { id, .. }
            | Step::AomToTarget { id, .. } => id,
        }
    }

    pub fn inputs(&self) -> Vec<&str> {
        match self {
            Step::Shg { input, .. }
            | Step::PdcDegenerate { input, .. }
            | Step::AomDoublePass { input, .. }
            | Step::AomToTarget { input, .. } => vec![input],
            Step::Sfg { inputs, .. } => inputs.iter().map(String::as_str).collect(),
        }
    }
}

/// Sources, then steps in evaluation order; every step reads nodes defined
/// above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub sources: BTreeMap<String, SourceSpec>,
    pub steps: Vec<Step>,
    pub output: String,
    pub afc: AfcSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainResult {
    pub nodes: BTreeMap<String, ChainNode>,
    /// Drive frequencies chosen by `aom_to_target` steps.
    pub aom_drives_hz: BTreeMap<String, f64>,
    pub budget: BudgetReport,
}

impl ChainSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Parse(format!("{}: {}", e.path(), e.inner())))
    }

    pub fn evaluate(&self) -> Result<ChainResult> {
        let mut nodes = BTreeMap::new();
        for (name, s) in &self.sources {
            let contributions = match (&s.sigma_abs_hz, &s.contributions) {
                (Some(sig), None) => BTreeMap::from([(name.clone(), *sig)]),
                (None, Some(c)) => c.clone(),
                (None, None) => BTreeMap::new(),
                (Some(_), Some(_)) => {
                    return param(format!(
                        "source {name}: give either sigma_abs_hz or contributions, not both"
                    ))
                }
            };
            let node = ChainNode::with_contributions(s.nominal_hz, s.tau_s, contributions)
                .map_err(|e| Error::Parameter(format!("source {name}: {e}")))?
                .with_offset(s.offset_hz);
            nodes.insert(name.clone(), node);
        }
        let mut drives = BTreeMap::new();
        for step in &self.steps {
            if nodes.contains_key(step.id()) {
                return param(format!("chain node {} is defined twice", step.id()));
            }
            let get = |k: &str| {
                nodes.get(k).ok_or_else(|| Error::Reference {
                    path: format!("steps[{}]", step.id()),
                    name: k.to_string(),
                })
            };
            let node = match step {
                Step::Shg { input, .. } => shg(get(input)?)?,
                Step::PdcDegenerate { input, .. } => pdc_degenerate(get(input)?)?,
                Step::Sfg {
                    inputs,
                    combination,
                    ..
                } => sfg_with(get(&inputs[0])?, get(&inputs[1])?, *combination)?,
                Step::AomDoublePass { input, f_rf_hz, .. } => {
                    aom_double_pass(get(input)?, *f_rf_hz)?
                }
                Step::AomToTarget {
                    input, target_hz, ..
                } => {
                    let cur = get(input)?;
                    let f = solve_aom(*target_hz, cur);
                    drives.insert(step.id().to_string(), f);
                    aom_double_pass(cur, f)?
                }
            };
            nodes.insert(step.id().to_string(), node);
        }
        let out = nodes.get(&self.output).ok_or_else(|| Error::Reference {
            path: "output".into(),
            name: self.output.clone(),
        })?;
        let budget = afc_budget(out, &self.afc)?;
        Ok(ChainResult {
            nodes,
            aom_drives_hz: drives,
            budget,
        })
    }
}
