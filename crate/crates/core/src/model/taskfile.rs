//! Line-oriented task documents.
//!
//! ```text
//! # comment
//! id = 1
//! type = Amplifier
//! difficulty = Easy            # optional, derived from the id when absent
//! instruction = Design a common-source amplifier
//! instruction += with a resistive load.
//! require_node = vout
//! require_analysis = ac
//! require_pins = Opamp: inp inn out
//! rule = nmos-bulk-tie         # any `rule` line replaces the default set; `rule = none` clears it
//! supply = vdd
//! convention = my-id: pattern one | pattern two
//! transfer_output = vout       # marks a transfer-curve task
//! bias_rule = MaxGainSlope
//! waveform_margin = 0.1
//! custom_type = true           # allow a label outside the shipped vocabulary
//!
//! [assertion]
//! kind = GainAtLeast
//! target = vout
//! tolerance = 0.05
//! min_gain = 5                 # every other key is a numeric parameter (SI suffixes allowed)
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use super::{
    AnalysisKind, AssertionKind, BiasRationale, ConstraintSet, Convention, Difficulty,
    FunctionalAssertion, ModelError, NamingRule, TaskInstance, TransferSpec, TASK_TYPE_VOCABULARY,
};
use crate::netlist::parse_value;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskFileError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing required key '{0}'")]
    MissingKey(&'static str),
    #[error("task type '{0}' is not in the vocabulary (set custom_type = true to declare it)")]
    UnknownTaskType(String),
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

fn syntax(line: usize, message: impl Into<String>) -> TaskFileError {
    TaskFileError::Syntax {
        line,
        message: message.into(),
    }
}

struct PendingAssertion {
    line: usize,
    kind: Option<AssertionKind>,
    target: Option<String>,
    tolerance: Option<f64>,
    params: Vec<(String, f64)>,
}

impl PendingAssertion {
    fn finish(self) -> Result<FunctionalAssertion, TaskFileError> {
        let kind = self
            .kind
            .ok_or_else(|| syntax(self.line, "assertion block without 'kind'"))?;
        let target = self
            .target
            .ok_or_else(|| syntax(self.line, "assertion block without 'target'"))?;
        let a = FunctionalAssertion {
            kind,
            target_signal: target,
            parameters: self.params.into_iter().collect(),
            tolerance: self.tolerance.unwrap_or(0.05),
        };
        a.validate()?;
        Ok(a)
    }
}

pub fn parse_task_file(text: &str) -> Result<TaskInstance, TaskFileError> {
    let mut id = None;
    let mut task_type = None;
    let mut difficulty = None;
    let mut instruction = String::new();
    let mut omega = ConstraintSet::default();
    let mut rules: Option<BTreeSet<NamingRule>> = None;
    let mut transfer_output = None;
    let mut bias_rule = None;
    let mut custom_type = false;
    let mut assertions = Vec::new();
    let mut pending: Option<PendingAssertion> = None;

    for (idx, raw) in text.lines().enumerate() {
        let ln = idx + 1;
        let line = match raw.find(" #") {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[assertion]" {
            if let Some(p) = pending.take() {
                assertions.push(p.finish()?);
            }
            pending = Some(PendingAssertion {
                line: ln,
                kind: None,
                target: None,
                tolerance: None,
                params: Vec::new(),
            });
            continue;
        }
        if line.starts_with('[') {
            return Err(syntax(ln, format!("unknown section {line}")));
        }
        let (key, append, value) = if let Some((k, v)) = line.split_once("+=") {
            (k.trim(), true, v.trim())
        } else if let Some((k, v)) = line.split_once('=') {
            (k.trim(), false, v.trim())
        } else {
            return Err(syntax(ln, "expected 'key = value'"));
        };
        let num = |v: &str| parse_value(v).ok_or_else(|| syntax(ln, format!("bad number '{v}'")));

        if let Some(p) = pending.as_mut() {
            match key {
                "kind" => {
                    p.kind = Some(
                        value
                            .parse()
                            .map_err(|e: super::AssertionError| syntax(ln, e.to_string()))?,
                    )
                }
                "target" => p.target = Some(value.to_string()),
                "tolerance" => p.tolerance = Some(num(value)?),
                _ => p.params.push((key.to_string(), num(value)?)),
            }
            continue;
        }

        match (key, append) {
            ("instruction", true) => {
                if !instruction.is_empty() {
                    instruction.push('\n');
                }
                instruction.push_str(value);
            }
            ("instruction", false) => instruction = value.to_string(),
            (_, true) => return Err(syntax(ln, format!("'+=' is only valid for instruction"))),
            ("id", _) => {
                id = Some(
                    value
                        .parse::<u32>()
                        .map_err(|_| syntax(ln, format!("bad id '{value}'")))?,
                )
            }
            ("type", _) => task_type = Some(value.to_string()),
            ("difficulty", _) => difficulty = Some(value.parse().map_err(|e: String| syntax(ln, e))?),
            ("require_node", _) => {
                omega.required_node_names.insert(value.to_string());
            }
            ("require_analysis", _) => {
                let a: AnalysisKind = value.parse().map_err(|e: String| syntax(ln, e))?;
                omega.simulator_settings.insert(a);
            }
            ("require_pins", _) => {
                let (name, pins) = value
                    .split_once(':')
                    .ok_or_else(|| syntax(ln, "expected 'Name: pin pin ...'"))?;
                omega.required_subcircuit_pins.insert(
                    name.trim().to_string(),
                    pins.split_whitespace().map(str::to_string).collect(),
                );
            }
            ("rule", _) => {
                let set = rules.get_or_insert_with(BTreeSet::new);
                if value != "none" {
                    set.insert(value.parse().map_err(|e: String| syntax(ln, e))?);
                }
            }
            ("supply", _) => omega.supply_node = value.to_string(),
            ("convention", _) => {
                let (cid, pats) = value
                    .split_once(':')
                    .ok_or_else(|| syntax(ln, "expected 'id: pattern | pattern'"))?;
                omega.conventions.push(Convention {
                    id: cid.trim().to_string(),
                    negation_patterns: pats
                        .split('|')
                        .map(|p| p.trim().to_lowercase())
                        .filter(|p| !p.is_empty())
                        .collect(),
                });
            }
            ("transfer_output", _) => transfer_output = Some(value.to_string()),
            ("bias_rule", _) => {
                bias_rule = Some(value.parse::<BiasRationale>().map_err(|e| syntax(ln, e))?)
            }
            ("waveform_margin", _) => omega.waveform_margin = num(value)?,
            ("custom_type", _) => custom_type = matches!(value, "true" | "yes" | "1"),
            _ => return Err(syntax(ln, format!("unknown key '{key}'"))),
        }
    }
    if let Some(p) = pending.take() {
        assertions.push(p.finish()?);
    }
    if let Some(r) = rules {
        omega.naming_rules = r;
    }

    let task_id = id.ok_or(TaskFileError::MissingKey("id"))?;
    let task_type = task_type.ok_or(TaskFileError::MissingKey("type"))?;
    if !custom_type && !TASK_TYPE_VOCABULARY.contains(&task_type.as_str()) {
        return Err(TaskFileError::UnknownTaskType(task_type));
    }
    let difficulty = match difficulty {
        Some(d) => d,
        None => Difficulty::for_benchmark_id(task_id).ok_or(TaskFileError::MissingKey("difficulty"))?,
    };
    let transfer = transfer_output.map(|output| TransferSpec {
        output,
        rule: bias_rule.unwrap_or(BiasRationale::MaxGainSlope),
    });
    let task = TaskInstance {
        task_id,
        instruction,
        task_type,
        constraints: omega,
        assertions,
        difficulty,
        transfer,
    };
    task.validate()?;
    Ok(task)
}

/// Render a task back into the document format. Parsing the output yields
/// an equal task.
pub fn render_task_file(task: &TaskInstance) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "id = {}", task.task_id);
    let _ = writeln!(s, "type = {}", task.task_type);
    if !TASK_TYPE_VOCABULARY.contains(&task.task_type.as_str()) {
        let _ = writeln!(s, "custom_type = true");
    }
    let _ = writeln!(s, "difficulty = {}", task.difficulty.as_str());
    for (i, line) in task.instruction.lines().enumerate() {
        let op = if i == 0 { "=" } else { "+=" };
        let _ = writeln!(s, "instruction {op} {line}");
    }
    let c = &task.constraints;
    for n in &c.required_node_names {
        let _ = writeln!(s, "require_node = {n}");
    }
    for a in &c.simulator_settings {
        let _ = writeln!(s, "require_analysis = {}", a.directive().trim_start_matches('.'));
    }
    for (name, pins) in &c.required_subcircuit_pins {
        let _ = writeln!(s, "require_pins = {name}: {}", pins.join(" "));
    }
    if c.naming_rules.is_empty() {
        let _ = writeln!(s, "rule = none");
    }
    for r in &c.naming_rules {
        let _ = writeln!(s, "rule = {}", r.rule_id());
    }
    let _ = writeln!(s, "supply = {}", c.supply_node);
    for conv in &c.conventions {
        let _ = writeln!(s, "convention = {}: {}", conv.id, conv.negation_patterns.join(" | "));
    }
    let _ = writeln!(s, "waveform_margin = {:e}", c.waveform_margin);
    if let Some(t) = &task.transfer {
        let _ = writeln!(s, "transfer_output = {}", t.output);
        let _ = writeln!(s, "bias_rule = {:?}", t.rule);
    }
    for a in &task.assertions {
        let _ = writeln!(s, "\n[assertion]");
        let _ = writeln!(s, "kind = {}", a.kind);
        let _ = writeln!(s, "target = {}", a.target_signal);
        let _ = writeln!(s, "tolerance = {:e}", a.tolerance);
        for (k, v) in &a.parameters {
            let _ = writeln!(s, "{k} = {v:e}");
        }
    }
    s
}
