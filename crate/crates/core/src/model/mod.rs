//! Problem-formulation types shared by every stage of the loop.
//!
//! A [`TaskInstance`] carries the instruction, the task-type label, the hard
//! interface constraints ([`ConstraintSet`]) and the functional assertions.
//! Executing a candidate yields an [`ExecutionOutcome`]; [`pass_verdict`]
//! is the conjunction that decides whether the candidate is valid.

mod assertion;
mod taskfile;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assertion::{
    assertion_loss, count_crossings, evaluate_assertion, AssertionError, AssertionResult,
    CrossingStats,
};
pub use taskfile::{parse_task_file, render_task_file, TaskFileError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    /// Tier of the benchmark id convention: 1-8 Easy, 9-13 Medium, 14-30 Hard.
    pub fn for_benchmark_id(id: u32) -> Option<Difficulty> {
        match id {
            1..=8 => Some(Difficulty::Easy),
            9..=13 => Some(Difficulty::Medium),
            14..=30 => Some(Difficulty::Hard),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Medium => "Medium",
            Difficulty::Hard => "Hard",
        }
    }
}

impl FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty '{other}'")),
        }
    }
}

/// Task-type labels of the benchmark families.
pub const TASK_TYPE_VOCABULARY: &[&str] = &[
    "Amplifier",
    "Inverter",
    "CurrentMirror",
    "Opamp",
    "Oscillator",
    "Integrator",
    "Differentiator",
    "Adder",
    "Subtractor",
    "Schmitt",
    "VCO",
    "PLL",
    "Comparator",
    "Filter",
    "BandPass",
    "BandStop",
    "Mixer",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnalysisKind {
    Op,
    Dc,
    Ac,
    Tran,
}

impl AnalysisKind {
    pub fn directive(self) -> &'static str {
        match self {
            AnalysisKind::Op => ".op",
            AnalysisKind::Dc => ".dc",
            AnalysisKind::Ac => ".ac",
            AnalysisKind::Tran => ".tran",
        }
    }
}

impl FromStr for AnalysisKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().trim_start_matches('.').to_ascii_lowercase().as_str() {
            "op" => Ok(AnalysisKind::Op),
            "dc" => Ok(AnalysisKind::Dc),
            "ac" => Ok(AnalysisKind::Ac),
            "tran" => Ok(AnalysisKind::Tran),
            other => Err(format!("unknown analysis '{other}'")),
        }
    }
}

/// Structural conventions a task can switch on; each maps to one checker in
/// [`crate::netlist::check_structure`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NamingRule {
    NmosBulkTie,
    PmosBulkTie,
}

impl NamingRule {
    pub fn rule_id(self) -> &'static str {
        match self {
            NamingRule::NmosBulkTie => "nmos-bulk-tie",
            NamingRule::PmosBulkTie => "pmos-bulk-tie",
        }
    }
}

impl FromStr for NamingRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "nmos-bulk-tie" => Ok(NamingRule::NmosBulkTie),
            "pmos-bulk-tie" => Ok(NamingRule::PmosBulkTie),
            other => Err(format!("unknown naming rule '{other}'")),
        }
    }
}

/// An invariant convention with the phrasings that contradict it. Rules whose
/// normalized text contains any negation pattern are rejected by the memory
/// filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Convention {
    pub id: String,
    pub negation_patterns: Vec<String>,
}

/// Hard interface constraints (Ω).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub required_node_names: BTreeSet<String>,
    pub required_subcircuit_pins: BTreeMap<String, Vec<String>>,
    pub simulator_settings: BTreeSet<AnalysisKind>,
    pub naming_rules: BTreeSet<NamingRule>,
    /// Node the PMOS bulk-tie rule refers to.
    pub supply_node: String,
    /// Extra conventions declared by the task, on top of the derived ones.
    pub conventions: Vec<Convention>,
    /// Waveform sanity band, as a fraction of the supply span.
    pub waveform_margin: f64,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            required_node_names: BTreeSet::new(),
            required_subcircuit_pins: BTreeMap::new(),
            simulator_settings: BTreeSet::new(),
            naming_rules: [NamingRule::NmosBulkTie, NamingRule::PmosBulkTie].into(),
            supply_node: "vdd".to_string(),
            conventions: Vec::new(),
            waveform_margin: 0.1,
        }
    }
}

impl ConstraintSet {
    /// An Ω with no rules at all.
    pub fn empty() -> Self {
        ConstraintSet {
            naming_rules: BTreeSet::new(),
            ..ConstraintSet::default()
        }
    }

    /// Declared conventions plus the ones implied by the constraint content.
    pub fn all_conventions(&self) -> Vec<Convention> {
        let mut out = self.conventions.clone();
        if !self.required_node_names.is_empty() {
            out.push(Convention {
                id: "fixed-node-names".into(),
                negation_patterns: vec![
                    "may use any node name".into(),
                    "any node name".into(),
                    "node names are arbitrary".into(),
                    "arbitrary node names".into(),
                    "rename the output".into(),
                    "output name does not matter".into(),
                ],
            });
        }
        if self.naming_rules.contains(&NamingRule::NmosBulkTie) {
            out.push(Convention {
                id: "nmos-bulk-tie".into(),
                negation_patterns: vec![
                    "nmos bulk may float".into(),
                    "nmos bulk can be left".into(),
                    "tie nmos bulk to vdd".into(),
                    "nmos bulk need not".into(),
                ],
            });
        }
        if self.naming_rules.contains(&NamingRule::PmosBulkTie) {
            out.push(Convention {
                id: "pmos-bulk-tie".into(),
                negation_patterns: vec![
                    "pmos bulk may float".into(),
                    "tie pmos bulk to ground".into(),
                    "pmos bulk need not".into(),
                ],
            });
        }
        for name in self.required_subcircuit_pins.keys() {
            let lname = name.to_lowercase();
            out.push(Convention {
                id: format!("subckt-interface:{name}"),
                negation_patterns: vec![
                    format!("redefine {lname} with"),
                    format!("{lname} pin order is flexible"),
                    format!("{lname} pins may be reordered"),
                ],
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AssertionKind {
    GainAtLeast,
    OutputSwitchesAt,
    MonotoneTransfer,
    CornerFrequencyNear,
    OscillatesWithPeriodNear,
    DCValueNear,
    AttenuationInBand,
}

impl AssertionKind {
    pub const ALL: [AssertionKind; 7] = [
        AssertionKind::GainAtLeast,
        AssertionKind::OutputSwitchesAt,
        AssertionKind::MonotoneTransfer,
        AssertionKind::CornerFrequencyNear,
        AssertionKind::OscillatesWithPeriodNear,
        AssertionKind::DCValueNear,
        AssertionKind::AttenuationInBand,
    ];

    pub fn required_parameters(self) -> &'static [&'static str] {
        match self {
            AssertionKind::GainAtLeast => &["min_gain"],
            AssertionKind::OutputSwitchesAt => &["threshold"],
            AssertionKind::MonotoneTransfer => &["direction"],
            AssertionKind::CornerFrequencyNear => &["freq"],
            AssertionKind::OscillatesWithPeriodNear => &["period"],
            AssertionKind::DCValueNear => &["value"],
            AssertionKind::AttenuationInBand => &["f_lo", "f_hi", "min_atten_db"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AssertionKind::GainAtLeast => "GainAtLeast",
            AssertionKind::OutputSwitchesAt => "OutputSwitchesAt",
            AssertionKind::MonotoneTransfer => "MonotoneTransfer",
            AssertionKind::CornerFrequencyNear => "CornerFrequencyNear",
            AssertionKind::OscillatesWithPeriodNear => "OscillatesWithPeriodNear",
            AssertionKind::DCValueNear => "DCValueNear",
            AssertionKind::AttenuationInBand => "AttenuationInBand",
        }
    }
}

impl fmt::Display for AssertionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AssertionKind {
    type Err = AssertionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AssertionKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AssertionError::UnsupportedKind(s.trim().to_string()))
    }
}

/// One functional check φ_k on the simulated results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalAssertion {
    pub kind: AssertionKind,
    pub target_signal: String,
    pub parameters: BTreeMap<String, f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("tolerance {0} outside (0, 1)")]
    BadTolerance(f64),
    #[error("{kind} requires parameter '{param}'")]
    MissingParameter { kind: AssertionKind, param: String },
    #[error("task has no assertions")]
    NoAssertions,
    #[error("task type label is empty")]
    EmptyTaskType,
}

impl FunctionalAssertion {
    pub fn new(
        kind: AssertionKind,
        target_signal: impl Into<String>,
        parameters: impl IntoIterator<Item = (&'static str, f64)>,
        tolerance: f64,
    ) -> Result<Self, ModelError> {
        let a = FunctionalAssertion {
            kind,
            target_signal: target_signal.into(),
            parameters: parameters
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            tolerance,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(ModelError::BadTolerance(self.tolerance));
        }
        for p in self.kind.required_parameters() {
            if !self.parameters.contains_key(*p) {
                return Err(ModelError::MissingParameter {
                    kind: self.kind,
                    param: p.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.parameters.get(key).copied()
    }

    /// Short label used in signatures and reports, e.g. `GainAtLeast(vout)`.
    pub fn label(&self) -> String {
        format!("{}({})", self.kind, self.target_signal)
    }
}

/// How the bias-repair step selects a bias point from a transfer curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BiasRationale {
    MidTransition,
    SaturationRegion,
    MaxGainSlope,
}

impl FromStr for BiasRationale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "MidTransition" => Ok(BiasRationale::MidTransition),
            "SaturationRegion" => Ok(BiasRationale::SaturationRegion),
            "MaxGainSlope" => Ok(BiasRationale::MaxGainSlope),
            other => Err(format!("unknown bias rule '{other}'")),
        }
    }
}

/// Transfer-curve tasks name the output node observed while sweeping the
/// candidate's bias source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub output: String,
    pub rule: BiasRationale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: u32,
    pub instruction: String,
    pub task_type: String,
    pub constraints: ConstraintSet,
    pub assertions: Vec<FunctionalAssertion>,
    pub difficulty: Difficulty,
    pub transfer: Option<TransferSpec>,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.task_type.trim().is_empty() {
            return Err(ModelError::EmptyTaskType);
        }
        if self.assertions.is_empty() {
            return Err(ModelError::NoAssertions);
        }
        self.assertions.iter().try_for_each(|a| a.validate())
    }

    pub fn is_transfer_curve(&self) -> bool {
        self.transfer.is_some()
    }
}

/// A sampled curve over a strictly increasing grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub grid: Vec<f64>,
    pub samples: Vec<f64>,
}

impl Curve {
    pub fn new(grid: Vec<f64>, samples: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), samples.len());
        Curve { grid, samples }
    }

    pub fn is_well_formed(&self) -> bool {
        self.grid.len() == self.samples.len() && self.grid.windows(2).all(|w| w[0] < w[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreqResponse {
    pub freqs: Vec<f64>,
    pub mag_db: Vec<f64>,
    pub phase_deg: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointData {
    pub node_voltages: BTreeMap<String, f64>,
    pub device_currents: BTreeMap<String, f64>,
}

/// The measured results z.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub operating_point: OperatingPointData,
    /// DC transfer curves keyed by node; the grid is the swept source value.
    pub sweeps: BTreeMap<String, Curve>,
    pub transients: BTreeMap<String, Curve>,
    pub ac_responses: BTreeMap<String, FreqResponse>,
}

impl ResultBundle {
    pub fn is_empty(&self) -> bool {
        self.operating_point.node_voltages.is_empty()
            && self.operating_point.device_currents.is_empty()
            && self.sweeps.is_empty()
            && self.transients.is_empty()
            && self.ac_responses.is_empty()
    }

    pub fn is_well_formed(&self) -> bool {
        self.sweeps.values().all(Curve::is_well_formed)
            && self.transients.values().all(Curve::is_well_formed)
            && self
                .ac_responses
                .values()
                .all(|r| r.freqs.windows(2).all(|w| w[0] < w[1]))
    }
}

/// Check stage that produced a diagnostic; Requirement..Waveform are the five
/// pipeline checks, Runtime covers generation/extraction failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Requirement,
    DCFeasibility,
    DCSweep,
    Functional,
    Waveform,
    Runtime,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Requirement => "Requirement",
            Stage::DCFeasibility => "DCFeasibility",
            Stage::DCSweep => "DCSweep",
            Stage::Functional => "Functional",
            Stage::Waveform => "Waveform",
            Stage::Runtime => "Runtime",
        }
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Stage::Requirement,
            Stage::DCFeasibility,
            Stage::DCSweep,
            Stage::Functional,
            Stage::Waveform,
            Stage::Runtime,
        ]
        .into_iter()
        .find(|st| st.as_str() == s.trim())
        .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

/// One failure record in the diagnostic log ℓ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub stage: Stage,
    /// Normalized key, stable across re-runs of the same failure.
    pub signature: String,
    /// Verbatim excerpt of the checker/simulator message.
    pub evidence: String,
    pub suggested_fix: Option<String>,
}

impl Diagnostic {
    pub fn new(stage: Stage, signature: impl Into<String>, evidence: impl Into<String>) -> Self {
        Diagnostic {
            stage,
            signature: signature.into(),
            evidence: evidence.into(),
            suggested_fix: None,
        }
    }

    /// Class part of the signature (text before the first ':').
    pub fn signature_class(&self) -> &str {
        self.signature.split(':').next().unwrap_or(&self.signature)
    }
}

/// (e, s, ℓ, z) plus accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub program_error: bool,
    pub simulator_error: bool,
    pub diagnostic_log: Vec<Diagnostic>,
    pub measurements: ResultBundle,
    pub wall_time: f64,
    pub token_cost: u64,
}

impl ExecutionOutcome {
    pub fn push_diagnostic(&mut self, d: Diagnostic) {
        self.diagnostic_log.push(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReasonCode {
    NotSatisfied,
    MissingMeasurement,
    UnsupportedKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedAssertion {
    pub index: usize,
    pub label: String,
    pub reason_code: ReasonCode,
    pub observed: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub failed_assertions: Vec<FailedAssertion>,
}

impl Verdict {
    /// Stable JSON line for workspace logs (field order is declaration order).
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

/// PASS(c) = (e = 0) ∧ (s = 0) ∧ ⋀ φ_k(z). Every assertion is evaluated so
/// the verdict lists all failing ones.
pub fn pass_verdict(task: &TaskInstance, outcome: &ExecutionOutcome) -> Verdict {
    let mut failed = Vec::new();
    for (index, a) in task.assertions.iter().enumerate() {
        match evaluate_assertion(a, &outcome.measurements) {
            Ok(r) if r.holds => {}
            Ok(r) => failed.push(FailedAssertion {
                index,
                label: a.label(),
                reason_code: ReasonCode::NotSatisfied,
                observed: r.observed.is_finite().then_some(r.observed),
                reason: r.reason,
            }),
            Err(e) => failed.push(FailedAssertion {
                index,
                label: a.label(),
                reason_code: match e {
                    AssertionError::MissingMeasurement(_) => ReasonCode::MissingMeasurement,
                    AssertionError::UnsupportedKind(_) => ReasonCode::UnsupportedKind,
                },
                observed: None,
                reason: e.to_string(),
            }),
        }
    }
    Verdict {
        pass: !outcome.program_error && !outcome.simulator_error && failed.is_empty(),
        failed_assertions: failed,
    }
}
