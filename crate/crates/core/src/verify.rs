//! The five-stage check pipeline, bias repair over a DC sweep, and
//! rule-catalog diagnosis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    evaluate_assertion, pass_verdict, AssertionError, BiasRationale, Curve, Diagnostic,
    ExecutionOutcome, ResultBundle, Stage, TaskInstance, Verdict,
};
use crate::netlist::{
    apply_patch, check_structure, emit, parse, AnalysisDirective, DeviceKind, Netlist, ParamPatch,
    ParseError,
};
use crate::sim::{
    ac_analysis, ac_grid, dc_sweep, linear_grid, operating_point, transient, MosRegion, SimError,
};

/// A generated design: the netlist text exactly as extracted, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignCandidate {
    pub source: String,
    pub iteration: u32,
    pub prompt_hash: String,
    /// Set on candidates produced by [`bias_repair`].
    pub bias_point: Option<BiasPoint>,
}

impl DesignCandidate {
    pub fn new(source: impl Into<String>) -> Self {
        DesignCandidate {
            source: source.into(),
            iteration: 0,
            prompt_hash: String::new(),
            bias_point: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub source_id: String,
    pub value: f64,
    pub rationale: BiasRationale,
}

/// Structural rules whose failure shows up as a solver failure rather than
/// a program error; the operating point stage reports them.
const SOLVER_LEVEL_RULES: &[&str] = &["dc-path-to-reference"];

fn parse_diagnostic(e: &ParseError) -> Diagnostic {
    let stage = match e {
        ParseError::SyntaxError { .. } => Stage::Runtime,
        _ => Stage::Requirement,
    };
    Diagnostic::new(stage, e.signature(), e.to_string())
}

fn sim_signature(prefix: &str, e: &SimError) -> String {
    match e.report() {
        Some(r) if !r.failure_nodes.is_empty() => {
            format!("{prefix}:{}", r.failure_nodes.join(","))
        }
        _ => prefix.to_string(),
    }
}

/// Lowest and highest level any independent voltage source can drive,
/// including ground.
fn supply_rails(n: &Netlist) -> (f64, f64) {
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    let mut see = |v: f64| {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    };
    for d in n.devices.iter().filter(|d| d.kind == DeviceKind::V) {
        see(d.param("dc").unwrap_or(0.0));
        if let (Some(vo), Some(va)) = (d.param("sin_vo"), d.param("sin_va")) {
            see(vo + va.abs());
            see(vo - va.abs());
        }
        for k in ["pulse_v1", "pulse_v2"] {
            if let Some(v) = d.param(k) {
                see(v);
            }
        }
    }
    (lo, hi)
}

fn push_curves<'a>(
    into: &mut BTreeMap<String, Curve>,
    names: impl IntoIterator<Item = &'a String>,
    curve: impl Fn(&str) -> Option<Curve>,
) {
    for name in names {
        if let Some(c) = curve(name) {
            into.insert(name.clone(), c);
        }
    }
}

/// The DC sweeps the task needs: every `.dc` directive, or the designated
/// bias range when the task asks for a transfer curve and none was given.
fn sweep_jobs(task: &TaskInstance, n: &Netlist) -> Vec<(String, Vec<f64>)> {
    let mut jobs: Vec<(String, Vec<f64>)> = n
        .analyses
        .iter()
        .filter_map(|a| match a {
            AnalysisDirective::Dc {
                source,
                start,
                stop,
                step,
            } => Some((source.clone(), linear_grid(*start, *stop, *step))),
            _ => None,
        })
        .collect();
    let wants = task.is_transfer_curve()
        || task
            .constraints
            .simulator_settings
            .contains(&crate::model::AnalysisKind::Dc);
    if jobs.is_empty() && wants {
        if let Some(b) = &n.bias {
            jobs.push((b.source.clone(), bias_grid(b.lo, b.hi, b.points)));
        }
    }
    jobs
}

fn bias_grid(lo: f64, hi: f64, points: u32) -> Vec<f64> {
    let k = points.max(2) as usize;
    (0..k)
        .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
        .collect()
}

/// Stage (v): every sample finite and inside the supply span widened by
/// the task's margin.
fn waveform_sanity(task: &TaskInstance, n: &Netlist, z: &ResultBundle, out: &mut ExecutionOutcome) {
    let (mut lo, mut hi) = supply_rails(n);
    for c in z.sweeps.values() {
        if let (Some(a), Some(b)) = (c.grid.first(), c.grid.last()) {
            lo = lo.min(a.min(*b));
            hi = hi.max(a.max(*b));
        }
    }
    let pad = task.constraints.waveform_margin * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let mut check = |what: &str, node: &str, samples: &mut dyn Iterator<Item = f64>| {
        let mut worst: Option<f64> = None;
        for v in samples {
            if !v.is_finite() {
                out.push_diagnostic(Diagnostic::new(
                    Stage::Waveform,
                    format!("waveform-nonfinite:{node}"),
                    format!("{what} of {node} contains a non-finite sample"),
                ));
                return true;
            }
            if v < lo || v > hi {
                let dev = if v < lo { lo - v } else { v - hi };
                if worst.is_none_or(|w| dev > (if w < lo { lo - w } else { w - hi })) {
                    worst = Some(v);
                }
            }
        }
        if let Some(v) = worst {
            out.push_diagnostic(Diagnostic::new(
                Stage::Waveform,
                format!("waveform-out-of-bounds:{node}"),
                format!("{what} of {node} reaches {v:.6} V outside [{lo:.4}, {hi:.4}] V"),
            ));
            return true;
        }
        false
    };
    let mut bad = false;
    for (node, v) in &z.operating_point.node_voltages {
        bad |= check("operating point", node, &mut std::iter::once(*v));
    }
    for (node, c) in &z.sweeps {
        bad |= check("DC sweep", node, &mut c.samples.iter().copied());
    }
    for (node, c) in &z.transients {
        bad |= check("transient", node, &mut c.samples.iter().copied());
    }
    for (node, r) in &z.ac_responses {
        if r.mag_db.iter().chain(&r.phase_deg).any(|v| !v.is_finite()) {
            bad |= check("AC response", node, &mut std::iter::once(f64::NAN));
        }
    }
    if bad {
        out.simulator_error = true;
    }
}

/// Run the check pipeline on one candidate. Every failure is encoded in
/// the outcome; nothing past the operating point runs when it fails.
pub fn run_pipeline(task: &TaskInstance, cand: &DesignCandidate) -> ExecutionOutcome {
    let mut out = ExecutionOutcome::default();

    // (i) requirement compliance.
    let n = match parse(&cand.source) {
        Ok(n) => n,
        Err(e) => {
            out.program_error = true;
            out.push_diagnostic(parse_diagnostic(&e));
            return out;
        }
    };
    let violations = check_structure(&n, &task.constraints);
    let mut deferred = Vec::new();
    for v in &violations {
        if SOLVER_LEVEL_RULES.contains(&v.rule_id.as_str()) {
            deferred.push(v);
            continue;
        }
        out.program_error = true;
        let evidence = if v.location > 0 {
            format!("line {}: {}", v.location, v.message)
        } else {
            v.message.clone()
        };
        out.push_diagnostic(Diagnostic::new(Stage::Requirement, v.signature(), evidence));
    }
    if out.program_error {
        return out;
    }

    // (ii) operating point.
    let op = match operating_point(&n) {
        Ok(op) => op,
        Err(e) => {
            out.simulator_error = true;
            let mut evidence = e.to_string();
            for v in &deferred {
                evidence.push_str("; ");
                evidence.push_str(&v.message);
            }
            out.push_diagnostic(Diagnostic::new(
                Stage::DCFeasibility,
                sim_signature("dc-nonconvergence", &e),
                evidence,
            ));
            return out;
        }
    };
    let z = &mut out.measurements;
    z.operating_point.node_voltages = op.node_voltages.clone();
    z.operating_point.device_currents = op.device_currents.clone();
    let mut diags = Vec::new();

    // (iii) DC sweep.
    for (source, grid) in sweep_jobs(task, &n) {
        match dc_sweep(&n, &source, &grid) {
            Ok(sw) => {
                let holes = sw.holes();
                if !holes.is_empty() {
                    diags.push(Diagnostic::new(
                        Stage::DCSweep,
                        format!("sweep-holes:{source}"),
                        format!(
                            "{} of {} sweep points of {source} did not converge, first at {} V",
                            holes.len(),
                            grid.len(),
                            grid[holes[0]]
                        ),
                    ));
                }
                push_curves(&mut z.sweeps, &sw.node_names, |k| sw.curve(k));
            }
            Err(e) => diags.push(Diagnostic::new(
                Stage::DCSweep,
                sim_signature("sweep-failed", &e),
                e.to_string(),
            )),
        }
    }
    let sweep_failed = !diags.is_empty();

    // AC and transient measurements feed the functional stage.
    let mut analysis_failed = false;
    for a in &n.analyses {
        match a {
            AnalysisDirective::Ac {
                sweep,
                points,
                fstart,
                fstop,
            } => match ac_analysis(&n, &ac_grid(*sweep, *points, *fstart, *fstop)) {
                Ok(r) => {
                    for name in &r.node_names {
                        if let Some(resp) = r.response(name) {
                            z.ac_responses.insert(name.clone(), resp);
                        }
                    }
                }
                Err(e) => {
                    analysis_failed = true;
                    diags.push(Diagnostic::new(Stage::Functional, sim_signature("ac-failed", &e), e.to_string()));
                }
            },
            AnalysisDirective::Tran { tstep, tstop, uic } => {
                match transient(&n, *tstop, *tstep, &BTreeMap::new(), *uic) {
                    Ok(r) => push_curves(&mut z.transients, &r.node_names, |k| r.curve(k)),
                    Err(e) => {
                        analysis_failed = true;
                        diags.push(Diagnostic::new(
                            Stage::Waveform,
                            sim_signature("tran-nonconvergence", &e),
                            e.to_string(),
                        ));
                    }
                }
            }
            AnalysisDirective::Op | AnalysisDirective::Dc { .. } => {}
        }
    }
    if sweep_failed || analysis_failed {
        out.simulator_error = true;
    }

    // (iv) functional assertions.
    for a in &task.assertions {
        match evaluate_assertion(a, &out.measurements) {
            Ok(r) if r.holds => {}
            Ok(r) => diags.push(Diagnostic::new(
                Stage::Functional,
                format!("assertion-failed:{}", a.label()),
                r.reason,
            )),
            Err(e @ AssertionError::MissingMeasurement(_)) => diags.push(Diagnostic::new(
                Stage::Functional,
                format!("missing-measurement:{}", a.label()),
                e.to_string(),
            )),
            Err(e) => diags.push(Diagnostic::new(
                Stage::Functional,
                format!("unsupported-assertion:{}", a.label()),
                e.to_string(),
            )),
        }
    }
    for d in diags {
        out.push_diagnostic(d);
    }

    // (v) waveform sanity.
    let z = out.measurements.clone();
    waveform_sanity(task, &n, &z, &mut out);
    out
}

/// [`run_pipeline`] plus the PASS verdict recomputed from its outcome.
pub fn evaluate(task: &TaskInstance, cand: &DesignCandidate) -> (ExecutionOutcome, Verdict) {
    let outcome = run_pipeline(task, cand);
    let verdict = pass_verdict(task, &outcome);
    (outcome, verdict)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BiasError {
    #[error("task {0} does not declare a transfer curve")]
    NotTransferCurve(u32),
    #[error("candidate does not parse: {0}")]
    Unparsable(String),
    #[error("candidate has no designated bias source")]
    NoBiasSource,
    #[error("bias sweep failed: {evidence}")]
    SweepFailed { signature: String, evidence: String },
    #[error("no grid point satisfies {0:?}")]
    NoFeasiblePoint(BiasRationale),
}

impl BiasError {
    /// The diagnostic this failure contributes to the iteration log.
    pub fn diagnostic(&self) -> Diagnostic {
        match self {
            BiasError::SweepFailed { signature, evidence } => {
                Diagnostic::new(Stage::DCSweep, signature.clone(), evidence.clone())
            }
            BiasError::NoBiasSource => Diagnostic::new(Stage::DCSweep, "no-bias-source", self.to_string()),
            other => Diagnostic::new(Stage::DCSweep, "bias-repair-failed", other.to_string()),
        }
    }
}

/// Grid argmax of |ΔVout/ΔVin| over adjacent pairs; the point returned is
/// the lower end of the steepest segment. Ties go to the smaller input.
pub fn max_gain_point(c: &Curve) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for i in 1..c.grid.len() {
        let slope = ((c.samples[i] - c.samples[i - 1]) / (c.grid[i] - c.grid[i - 1])).abs();
        if slope.is_finite() && best.is_none_or(|(s, _)| slope > s) {
            best = Some((slope, c.grid[i - 1]));
        }
    }
    best.map(|(_, x)| x)
}

/// Input where the output first crosses (Vhigh + Vlow) / 2, by linear
/// interpolation between grid points.
pub fn mid_transition_point(c: &Curve) -> Option<f64> {
    let hi = c.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = c.samples.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return None;
    }
    let mid = 0.5 * (hi + lo);
    (1..c.grid.len()).find_map(|i| {
        let (d0, d1) = (c.samples[i - 1] - mid, c.samples[i] - mid);
        if d0 == 0.0 {
            Some(c.grid[i - 1])
        } else if d0.signum() != d1.signum() {
            Some(c.grid[i - 1] + d0 / (d0 - d1) * (c.grid[i] - c.grid[i - 1]))
        } else {
            None
        }
    })
}

/// Centre of the longest run of grid points at which every MOSFET is in
/// saturation; ties go to the run at smaller input.
fn saturation_point(n: &Netlist, source: &str, grid: &[f64]) -> Option<f64> {
    let ok: Vec<bool> = grid
        .iter()
        .map(|v| {
            let patched = apply_patch(
                n,
                &ParamPatch {
                    device_id: source.to_string(),
                    param: "dc".into(),
                    value: *v,
                },
            )
            .ok();
            patched
                .and_then(|p| operating_point(&p).ok())
                .is_some_and(|op| {
                    !op.regions.is_empty() && op.regions.values().all(|r| *r == MosRegion::Saturation)
                })
        })
        .collect();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < ok.len() {
        if !ok[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < ok.len() && ok[i] {
            i += 1;
        }
        if best.is_none_or(|(s, e)| i - start > e - s) {
            best = Some((start, i));
        }
    }
    best.map(|(s, e)| grid[(s + e - 1) / 2])
}

/// Sweep the candidate's bias source over its declared range, select a bias
/// point by the task's rule, and return the patched sibling candidate.
pub fn bias_repair(task: &TaskInstance, cand: &DesignCandidate) -> Result<DesignCandidate, BiasError> {
    let spec = task
        .transfer
        .as_ref()
        .ok_or(BiasError::NotTransferCurve(task.task_id))?;
    let n = parse(&cand.source).map_err(|e| BiasError::Unparsable(e.to_string()))?;
    let b = n.bias.clone().ok_or(BiasError::NoBiasSource)?;
    let src = n
        .device(&b.source)
        .filter(|d| d.kind == DeviceKind::V)
        .ok_or(BiasError::NoBiasSource)?
        .id
        .clone();
    let grid = bias_grid(b.lo, b.hi, b.points);
    let value = match spec.rule {
        BiasRationale::SaturationRegion => saturation_point(&n, &src, &grid)
            .ok_or(BiasError::NoFeasiblePoint(spec.rule))?,
        rule => {
            let sw = dc_sweep(&n, &src, &grid).map_err(|e| BiasError::SweepFailed {
                signature: sim_signature("sweep-failed", &e),
                evidence: e.to_string(),
            })?;
            let curve = sw.curve(&spec.output).ok_or_else(|| BiasError::SweepFailed {
                signature: format!("sweep-failed:{}", spec.output),
                evidence: format!("output node {} is not in the circuit", spec.output),
            })?;
            let pick = if rule == BiasRationale::MaxGainSlope {
                max_gain_point(&curve)
            } else {
                mid_transition_point(&curve)
            };
            pick.ok_or(BiasError::NoFeasiblePoint(rule))?
        }
    };
    let patched = apply_patch(
        &n,
        &ParamPatch {
            device_id: src.clone(),
            param: "dc".into(),
            value,
        },
    )
    .map_err(|e| BiasError::Unparsable(e.to_string()))?;
    Ok(DesignCandidate {
        source: emit(&patched),
        iteration: cand.iteration,
        prompt_hash: cand.prompt_hash.clone(),
        bias_point: Some(BiasPoint {
            source_id: src,
            value,
            rationale: spec.rule,
        }),
    })
}

/// Signature class (or full signature) to corrective action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixCatalog {
    pub entries: Vec<(String, String)>,
}

const BUILTIN_FIXES: &[(&str, &str)] = &[
    ("duplicate-identifier", "assign globally unique instance identifiers within each scope"),
    ("subckt-undefined", "define/load subcircuit before any circuit.X(...) instantiation"),
    ("subckt-pins", "keep the required subcircuit name and pin order exactly as specified"),
    ("arity-mismatch", "match each instance's pin count to its definition; MOSFET pins are drain, gate, source, body"),
    ("unknown-model", "declare a .model card for every model a device references"),
    ("nmos-bulk-tie", "NMOS bulk must tie to source"),
    ("pmos-bulk-tie", "PMOS bulk must tie to the supply node"),
    ("required-node", "outputs must be named exactly as the task requires"),
    ("required-analysis", "include every analysis directive the task requires"),
    ("syntax-error", "emit only netlist statements in the supported grammar, one per line"),
    ("dc-nonconvergence", "ensure every node has a DC path to a reference for operating-point convergence"),
    ("sweep-failed", "keep the swept source within a range where the circuit has a DC solution"),
    ("tran-nonconvergence", "give every node a DC path to ground and reduce the transient step"),
    ("missing-measurement", "add the analysis directive that measures the asserted signal"),
    ("waveform-out-of-bounds", "check source polarities and values; node voltages must stay within the supplies"),
];

impl Default for FixCatalog {
    fn default() -> Self {
        FixCatalog {
            entries: BUILTIN_FIXES
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl FixCatalog {
    /// `key = fix` lines; `#` starts a comment. Later keys override earlier
    /// ones, so a user file can extend the built-in set.
    pub fn parse(text: &str) -> Result<FixCatalog, String> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = fix'", i + 1))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(FixCatalog { entries })
    }

    pub fn extend(&mut self, other: FixCatalog) {
        self.entries.extend(other.entries);
    }

    /// A full-signature entry beats a class entry; the last matching entry
    /// of each kind wins.
    pub fn lookup(&self, signature: &str) -> Option<&str> {
        let class = signature.split(':').next().unwrap_or(signature);
        let find = |key: &str| {
            self.entries
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        find(signature).or_else(|| find(class))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiagnoseError {
    #[error("outcome has no failure to diagnose")]
    NothingToDiagnose,
}

/// Attach catalog fixes to every diagnostic of a failing outcome. Unknown
/// signatures keep `suggested_fix = None` and go to the backend verbatim.
pub fn diagnose(outcome: &ExecutionOutcome, catalog: &FixCatalog) -> Result<Vec<Diagnostic>, DiagnoseError> {
    if !outcome.program_error && !outcome.simulator_error && outcome.diagnostic_log.is_empty() {
        return Err(DiagnoseError::NothingToDiagnose);
    }
    Ok(outcome
        .diagnostic_log
        .iter()
        .map(|d| Diagnostic {
            suggested_fix: catalog.lookup(&d.signature).map(str::to_string),
            ..d.clone()
        })
        .collect())
}

/// One JSON record per line, in log order.
pub fn render_feedback_log(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| serde_json::to_string(d).expect("diagnostic serializes") + "\n")
        .collect()
}

pub fn parse_feedback_log(text: &str) -> Result<Vec<Diagnostic>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
