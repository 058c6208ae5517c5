//! Prompt assembly, text-generation backends, netlist extraction and
//! backend-assisted curation.
//!
//! This is the only module that talks to the network.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{distill, AdmissionBasis, FeedbackBundle, MemoryConfig, PlaybookEntry, Provenance, Scope};
use crate::model::{Diagnostic, TaskInstance};
use crate::netlist::format_value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectionKind {
    TaskRequirements,
    DesignInstruction,
    RelevantKnowledge,
    FailureFeedback,
}

impl SectionKind {
    pub fn heading(self) -> &'static str {
        match self {
            SectionKind::TaskRequirements => "Task Requirements",
            SectionKind::DesignInstruction => "Design Instruction",
            SectionKind::RelevantKnowledge => "Relevant Knowledge",
            SectionKind::FailureFeedback => "Failure Feedback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub sections: Vec<(SectionKind, String)>,
    pub token_estimate: usize,
    /// `entry:<id>` for each injected rule, `feedback:<signature>` for each
    /// injected diagnostic.
    pub composition_trace: Vec<String>,
}

/// Four characters per token, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

impl Prompt {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, (kind, body)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "## {}", kind.heading());
            out.push_str(body);
            if !body.ends_with('\n') {
                out.push('\n');
            }
        }
        out
    }

    pub fn section(&self, kind: SectionKind) -> Option<&str> {
        self.sections
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, b)| b.as_str())
    }

    pub fn hash(&self) -> String {
        crate::util::sha256_hex(self.render().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Most diagnostics shown in the feedback section.
    pub feedback_cap: usize,
    /// Context budget of the backend, in estimated tokens.
    pub context_budget: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            feedback_cap: 8,
            context_budget: 8000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("mandatory prompt sections need {needed} tokens, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("iteration numbers start at 1")]
    BadIteration,
    #[error("curator output has no rule records")]
    MalformedCuration,
}

pub fn render_requirements(task: &TaskInstance) -> String {
    let c = &task.constraints;
    let mut s = String::new();
    let _ = writeln!(s, "Task {} ({}, {})", task.task_id, task.task_type, task.difficulty.as_str());
    let _ = writeln!(s, "{}", task.instruction.trim_end());
    s.push_str("Interface constraints:\n");
    if !c.required_node_names.is_empty() {
        let names: Vec<&str> = c.required_node_names.iter().map(String::as_str).collect();
        let _ = writeln!(s, "- nodes named exactly: {}", names.join(", "));
    }
    for (name, pins) in &c.required_subcircuit_pins {
        let _ = writeln!(s, "- subcircuit {name} with pins in order: {}", pins.join(" "));
    }
    if !c.simulator_settings.is_empty() {
        let a: Vec<&str> = c.simulator_settings.iter().map(|k| k.directive()).collect();
        let _ = writeln!(s, "- include analyses: {}", a.join(" "));
    }
    let _ = writeln!(s, "- supply node: {}", c.supply_node);
    for r in &c.naming_rules {
        let _ = writeln!(s, "- rule: {}", r.rule_id());
    }
    if let Some(t) = &task.transfer {
        let _ = writeln!(
            s,
            "- designate the input bias source with .bias <source> <lo> <hi> [points]; output node {}",
            t.output
        );
    }
    s.push_str("Functional targets:\n");
    for a in &task.assertions {
        let params: Vec<String> = a
            .parameters
            .iter()
            .map(|(k, v)| format!("{k}={}", format_value(*v)))
            .collect();
        let _ = writeln!(
            s,
            "- {}: {}; tolerance {}%",
            a.label(),
            params.join(", "),
            format_value(a.tolerance * 100.0)
        );
    }
    s
}

const DESIGN_INSTRUCTION: &str = "\
Write a SPICE netlist that meets every requirement above.
Statements: R C L V I (DC/AC/SIN/PULSE) M D X, .model, .subckt/.ends, .op, .dc, .ac, .tran, .ic, .bias, .end.
MOSFET pins are drain gate source body. Nodes are created by use; node 0 is ground.
Return the complete netlist in a single fenced code block.
";

/// P_t = P_task(x) ⊕ r_t: ordered, headed sections. The feedback section
/// appears from iteration 2 on, newest diagnostic first.
pub fn compose_prompt(
    task: &TaskInstance,
    retrieved: &[PlaybookEntry],
    feedback: &[Diagnostic],
    subgoal: &str,
    iteration: u32,
    cfg: &PromptConfig,
) -> Result<Prompt, AgentError> {
    if iteration == 0 {
        return Err(AgentError::BadIteration);
    }
    let req = render_requirements(task);
    let mandatory = estimate_tokens(&req) + estimate_tokens(DESIGN_INSTRUCTION);
    if mandatory > cfg.context_budget {
        return Err(AgentError::BudgetExceeded {
            needed: mandatory,
            budget: cfg.context_budget,
        });
    }
    let mut trace = Vec::new();
    let mut knowledge = String::new();
    if retrieved.is_empty() {
        knowledge.push_str("(no stored rules apply)\n");
    }
    for e in retrieved {
        let _ = writeln!(knowledge, "- {}", e.rule);
        trace.push(format!("entry:{}", e.entry_id));
    }
    let mut sections = vec![
        (SectionKind::TaskRequirements, req),
        (SectionKind::DesignInstruction, DESIGN_INSTRUCTION.to_string()),
        (SectionKind::RelevantKnowledge, knowledge),
    ];
    if iteration >= 2 {
        let used: usize = sections.iter().map(|(_, b)| estimate_tokens(b)).sum();
        let header = format!("Sub-goal: {subgoal}\n");
        let render = |d: &Diagnostic| {
            let mut s = format!("- [{}] {}: {}\n", d.stage.as_str(), d.signature, d.evidence);
            if let Some(fix) = &d.suggested_fix {
                let _ = writeln!(s, "  fix: {fix}");
            }
            s
        };
        let mut shown: Vec<&Diagnostic> = feedback.iter().rev().take(cfg.feedback_cap).collect();
        let total = |shown: &[&Diagnostic]| {
            used + estimate_tokens(&(header.clone() + &shown.iter().map(|d| render(d)).collect::<String>()))
        };
        while !shown.is_empty() && total(&shown) > cfg.context_budget {
            shown.pop();
        }
        let mut body = header.clone();
        for d in &shown {
            body.push_str(&render(d));
            trace.push(format!("feedback:{}", d.signature));
        }
        sections.push((SectionKind::FailureFeedback, body));
    }
    let mut p = Prompt {
        sections,
        token_estimate: 0,
        composition_trace: trace,
    };
    p.token_estimate = estimate_tokens(&p.render());
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Purpose {
    Generate,
    Curate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request<'a> {
    pub task_id: u32,
    pub iteration: u32,
    pub purpose: Purpose,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens: u64,
    /// Request and response bodies with credentials removed.
    pub audit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend timed out or was unreachable: {0}")]
    BackendTimeout(String),
    #[error("backend refused the request: {0}")]
    BackendRefusal(String),
    #[error("backend quota exhausted: {0}")]
    QuotaExhausted(String),
}

impl BackendError {
    pub fn signature(&self) -> &'static str {
        match self {
            BackendError::BackendTimeout(_) => "backend-timeout",
            BackendError::BackendRefusal(_) => "backend-refusal",
            BackendError::QuotaExhausted(_) => "quota-exhausted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    HttpApi,
    Scripted,
}

pub trait TextBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, req: &Request<'_>) -> Result<Completion, BackendError>;
}

/// Marker returned once a script has no response left for a task.
pub const TERMINAL_RESPONSE: &str = "<<script exhausted>>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRecord {
    /// `None` matches any task.
    pub task: Option<u32>,
    /// `None` matches any iteration.
    pub iteration: Option<u32>,
    /// When set, the record only applies if the prompt contains this text.
    pub when: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

/// Deterministic offline backend: an ordered list of canned responses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedBackend {
    pub records: Vec<ScriptRecord>,
    pub terminal: Option<String>,
}

fn parse_selector(tok: Option<&str>, line: usize) -> Result<Option<u32>, ScriptError> {
    match tok {
        Some("*") => Ok(None),
        Some(t) => t.parse().map(Some).map_err(|_| ScriptError {
            line,
            message: format!("expected a number or '*', found '{t}'"),
        }),
        None => Err(ScriptError {
            line,
            message: "record header is '=== task <id|*> iter <n|*> [when <text>]'".into(),
        }),
    }
}

impl ScriptedBackend {
    /// Script file: records introduced by `=== task <id|*> iter <n|*>
    /// [when <text>]`, or `=== terminal`; the record body runs to the next
    /// header. Lines before the first header are ignored.
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut b = ScriptedBackend::default();
        let mut current: Option<(Option<ScriptRecord>, String)> = None;
        let finish = |b: &mut ScriptedBackend, cur: Option<(Option<ScriptRecord>, String)>| {
            if let Some((rec, body)) = cur {
                match rec {
                    Some(mut r) => {
                        r.text = body;
                        b.records.push(r);
                    }
                    None => b.terminal = Some(body.trim_end().to_string()),
                }
            }
        };
        for (i, line) in text.lines().enumerate() {
            let Some(header) = line.strip_prefix("=== ") else {
                if let Some((_, body)) = current.as_mut() {
                    body.push_str(line);
                    body.push('\n');
                }
                continue;
            };
            finish(&mut b, current.take());
            let header = header.trim();
            if header == "terminal" {
                current = Some((None, String::new()));
                continue;
            }
            let (head, when) = match header.split_once(" when ") {
                Some((h, w)) => (h, Some(w.trim().to_string())),
                None => (header, None),
            };
            let toks: Vec<&str> = head.split_whitespace().collect();
            if toks.len() != 4 || toks[0] != "task" || toks[2] != "iter" {
                return Err(ScriptError {
                    line: i + 1,
                    message: format!("bad record header '{header}'"),
                });
            }
            current = Some((
                Some(ScriptRecord {
                    task: parse_selector(toks.get(1).copied(), i + 1)?,
                    iteration: parse_selector(toks.get(3).copied(), i + 1)?,
                    when,
                    text: String::new(),
                }),
                String::new(),
            ));
        }
        finish(&mut b, current);
        Ok(b)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// First record matching (task, iteration) whose `when` text, if any,
    /// occurs in the prompt; otherwise the terminal response.
    pub fn respond(&self, task_id: u32, iteration: u32, prompt: &str) -> &str {
        self.records
            .iter()
            .find(|r| {
                r.task.is_none_or(|t| t == task_id)
                    && r.iteration.is_none_or(|i| i == iteration)
                    && r.when.as_ref().is_none_or(|w| prompt.contains(w.as_str()))
            })
            .map(|r| r.text.as_str())
            .unwrap_or_else(|| self.terminal.as_deref().unwrap_or(TERMINAL_RESPONSE))
    }
}

impl TextBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, req: &Request<'_>) -> Result<Completion, BackendError> {
        let text = self.respond(req.task_id, req.iteration, req.prompt).to_string();
        let tokens = (estimate_tokens(req.prompt) + estimate_tokens(&text)) as u64;
        Ok(Completion {
            text,
            tokens,
            audit: None,
        })
    }
}

/// Chat-completions style HTTP adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackend {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: "ANALOG_LOOP_API_KEY".into(),
            max_tokens: 4096,
            temperature: 0.0,
            timeout_secs: 120,
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    max_tokens: u32,
    temperature: f64,
}

impl TextBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::HttpApi
    }

    fn complete(&self, req: &Request<'_>) -> Result<Completion, BackendError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: req.prompt,
            }],
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut call = agent.post(&self.endpoint);
        if let Ok(key) = std::env::var(&self.api_key_env) {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let request_json = serde_json::to_string(&body).unwrap_or_default();
        let mut resp = call
            .send_json(&body)
            .map_err(|e| BackendError::BackendTimeout(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::BackendTimeout(e.to_string()))?;
        let audit = Some(format!(
            "POST {}\nAuthorization: [redacted]\n\n{request_json}\n\n--- status {status}\n{text}\n",
            self.endpoint
        ));
        match status {
            200..=299 => {}
            429 => return Err(BackendError::QuotaExhausted(text)),
            400..=499 => return Err(BackendError::BackendRefusal(format!("status {status}: {text}"))),
            _ => return Err(BackendError::BackendTimeout(format!("status {status}: {text}"))),
        }
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::BackendRefusal(format!("unreadable response: {e}")))?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::BackendRefusal("response has no message content".into()))?
            .to_string();
        let tokens = v["usage"]["total_tokens"]
            .as_u64()
            .unwrap_or_else(|| (estimate_tokens(req.prompt) + estimate_tokens(&content)) as u64);
        Ok(Completion {
            text: content,
            tokens,
            audit,
        })
    }
}

/// Serializable backend choice: `scripted:<path>` or `http:<url>[#model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BackendSpec {
    Scripted(ScriptedBackend),
    Http(HttpBackend),
}

impl BackendSpec {
    pub fn parse(spec: &str) -> Result<Self, String> {
        if let Some(path) = spec.strip_prefix("scripted:") {
            return ScriptedBackend::load(Path::new(path)).map(BackendSpec::Scripted);
        }
        if let Some(rest) = spec.strip_prefix("http:") {
            let (url, model) = rest.split_once('#').unwrap_or((rest, "default"));
            return Ok(BackendSpec::Http(HttpBackend::new(url, model)));
        }
        Err(format!("backend spec must be scripted:<path> or http:<url>[#model], got '{spec}'"))
    }

    pub fn backend(&self) -> &dyn TextBackend {
        match self {
            BackendSpec::Scripted(b) => b,
            BackendSpec::Http(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub source_text: String,
    pub token_cost: u64,
    pub audit: Option<String>,
}

/// c_t = G(P_t). The raw text is returned untouched.
pub fn generate(backend: &dyn TextBackend, task_id: u32, iteration: u32, p: &Prompt) -> Result<Generation, BackendError> {
    let rendered = p.render();
    let c = backend.complete(&Request {
        task_id,
        iteration,
        purpose: Purpose::Generate,
        prompt: &rendered,
    })?;
    Ok(Generation {
        source_text: c.text,
        token_cost: c.tokens,
        audit: c.audit,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no fenced code block in the response")]
    NoFencedBlock,
    #[error("fenced code block is not closed")]
    Unterminated,
}

/// Body of the first fenced block; the info string and any prose around
/// the block are dropped.
pub fn extract_netlist(text: &str) -> Result<String, ExtractError> {
    let mut lines = text.lines();
    let mut open: Option<&str> = None;
    for l in lines.by_ref() {
        let t = l.trim_start();
        if t.starts_with("```") || t.starts_with("~~~") {
            open = Some(&t[..3]);
            break;
        }
    }
    let fence = open.ok_or(ExtractError::NoFencedBlock)?;
    let mut body = String::new();
    for l in lines {
        if l.trim_start().starts_with(fence) {
            return Ok(body);
        }
        body.push_str(l);
        body.push('\n');
    }
    Err(ExtractError::Unterminated)
}

fn curation_prompt(b: &FeedbackBundle) -> String {
    let mut s = format!(
        "Task {} ({}) iteration {}: {}.\nDiagnostics:\n",
        b.task.task_id,
        b.task.task_type,
        b.iteration,
        if b.pass { "passed" } else { "failed" }
    );
    for d in &b.diagnostics {
        let _ = writeln!(s, "- {}: {}", d.signature, d.evidence);
    }
    s.push_str(
        "Distill reusable design rules. For each rule write a block of lines:\n\
RULE: <imperative rule>\nSCOPE: General | <task type>\nTRIGGER: <signature or task type>\n\
APPLICABILITY: <when to apply>\nBASIS: RepeatedFailure | CheckerViolationMultiple | StableDesignPractice\n",
    );
    s
}

/// Parse `KEY: value` blocks into entries. Blocks without a RULE line are
/// skipped; text with no rule at all is malformed.
pub fn parse_curation(text: &str, b: &FeedbackBundle, cfg: &MemoryConfig) -> Result<Vec<PlaybookEntry>, AgentError> {
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let mut f: BTreeMap<String, String> = BTreeMap::new();
        for line in block.lines() {
            if let Some((k, v)) = line.split_once(':') {
                let key = k.trim().trim_start_matches(['-', '*', ' ']).to_ascii_uppercase();
                f.insert(key, v.trim().to_string());
            }
        }
        let Some(rule) = f.get("RULE").filter(|r| !r.is_empty()) else {
            continue;
        };
        let scope = match f.get("SCOPE").map(String::as_str) {
            None | Some("") | Some("General") => Scope::General,
            Some(t) => Scope::TaskType(t.to_string()),
        };
        let basis = match f.get("BASIS").map(String::as_str) {
            Some("CheckerViolationMultiple") => AdmissionBasis::CheckerViolationMultiple,
            Some("StableDesignPractice") => AdmissionBasis::StableDesignPractice,
            _ => AdmissionBasis::RepeatedFailure,
        };
        let evidence = b
            .diagnostics
            .first()
            .map(|d| d.evidence.clone())
            .unwrap_or_else(|| format!("iteration {} passed", b.iteration));
        out.push(PlaybookEntry::new(
            scope,
            f.get("TRIGGER").cloned().unwrap_or_else(|| b.task.task_type.clone()),
            evidence,
            rule.chars().take(cfg.rule_max_len).collect::<String>(),
            f.get("APPLICABILITY").cloned().unwrap_or_default(),
            Provenance {
                task_id: b.task.task_id,
                iteration: b.iteration,
                timestamp: b.timestamp,
            },
            basis,
        ));
    }
    if out.is_empty() {
        Err(AgentError::MalformedCuration)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curation {
    pub entries: Vec<PlaybookEntry>,
    /// Set when the backend answer was unusable and the rule-based result
    /// was returned instead.
    pub fallback: Option<String>,
    pub tokens: u64,
}

/// Candidate entries for the store. A scripted backend yields exactly the
/// rule-based distillation. A live backend's rules are appended to it, but
/// only when the rule-based admission found evidence (or the curator tagged
/// the run), so the backend cannot bypass admission control.
pub fn curate(backend: &dyn TextBackend, b: &FeedbackBundle, cfg: &MemoryConfig) -> Curation {
    let floor = distill(b, cfg);
    if backend.kind() == BackendKind::Scripted || (floor.is_empty() && b.promote.is_empty()) {
        return Curation {
            entries: floor,
            fallback: None,
            tokens: 0,
        };
    }
    let prompt = curation_prompt(b);
    let reply = backend.complete(&Request {
        task_id: b.task.task_id,
        iteration: b.iteration,
        purpose: Purpose::Curate,
        prompt: &prompt,
    });
    match reply {
        Err(e) => Curation {
            entries: floor,
            fallback: Some(e.to_string()),
            tokens: 0,
        },
        Ok(c) => match parse_curation(&c.text, b, cfg) {
            Ok(extra) => {
                let mut entries = floor;
                for e in extra {
                    if !entries.iter().any(|x| x.entry_id == e.entry_id) {
                        entries.push(e);
                    }
                }
                Curation {
                    entries,
                    fallback: None,
                    tokens: c.tokens,
                }
            }
            Err(e) => Curation {
                entries: floor,
                fallback: Some(e.to_string()),
                tokens: c.tokens,
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{update, MemoryState, IterationRecord};
    use crate::model::{AssertionKind, ConstraintSet, Difficulty, ExecutionOutcome, FunctionalAssertion, Stage};
    use crate::verify::DesignCandidate;
    use proptest::prelude::*;

    fn task() -> TaskInstance {
        let mut c = ConstraintSet::default();
        c.required_node_names.insert("Vout".into());
        TaskInstance {
            task_id: 1,
            instruction: "Design a single-stage common-source amplifier with resistive load.".into(),
            task_type: "Amplifier".into(),
            constraints: c,
            assertions: vec![FunctionalAssertion::new(AssertionKind::GainAtLeast, "Vout", [("min_gain", 5.0)], 0.05).unwrap()],
            difficulty: Difficulty::Easy,
            transfer: None,
        }
    }

    fn rule(text: &str, ts: u64) -> PlaybookEntry {
        crate::memory::tests::entry(Scope::General, text, ts)
    }

    fn diag(i: usize) -> Diagnostic {
        Diagnostic::new(Stage::Functional, format!("sig-{i}:x"), format!("evidence {i}"))
    }

    #[test]
    fn first_iteration_has_three_sections_with_verbatim_rules() {
        let r = [rule("NMOS bulk must tie to source", 1), rule("Outputs must be named exactly: Vout", 2)];
        let p = compose_prompt(&task(), &r, &[], "produce a candidate", 1, &PromptConfig::default()).unwrap();
        let kinds: Vec<_> = p.sections.iter().map(|s| s.0).collect();
        assert_eq!(kinds, [SectionKind::TaskRequirements, SectionKind::DesignInstruction, SectionKind::RelevantKnowledge]);
        let text = p.render();
        assert!(text.contains("NMOS bulk must tie to source"));
        assert!(text.contains("Outputs must be named exactly: Vout"));
        assert_eq!(p.composition_trace.len(), 2);
        assert_eq!(p.token_estimate, estimate_tokens(&text));
    }

    #[test]
    fn feedback_is_newest_first_and_capped() {
        let fb: Vec<_> = (0..5).map(diag).collect();
        let cfg = PromptConfig { feedback_cap: 3, ..PromptConfig::default() };
        let p = compose_prompt(&task(), &[], &fb, "resolve: x", 3, &cfg).unwrap();
        let body = p.section(SectionKind::FailureFeedback).unwrap();
        let shown: Vec<&str> = body.lines().filter_map(|l| l.strip_prefix("- [Functional] ")).collect();
        // Oracle: the last three pushed, reversed.
        let expected: Vec<String> = fb[2..].iter().rev().map(|d| format!("{}: {}", d.signature, d.evidence)).collect();
        assert_eq!(shown, expected);
    }

    #[test]
    fn empty_knowledge_keeps_its_section() {
        let p = compose_prompt(&task(), &[], &[], "g", 1, &PromptConfig::default()).unwrap();
        assert_eq!(p.section(SectionKind::RelevantKnowledge), Some("(no stored rules apply)\n"));
    }

    #[test]
    fn budget_and_iteration_errors() {
        let cfg = PromptConfig { context_budget: 10, ..PromptConfig::default() };
        assert!(matches!(compose_prompt(&task(), &[], &[], "g", 1, &cfg), Err(AgentError::BudgetExceeded { .. })));
        assert_eq!(compose_prompt(&task(), &[], &[], "g", 0, &PromptConfig::default()), Err(AgentError::BadIteration));
    }

    #[test]
    fn feedback_trimmed_to_budget() {
        let base = compose_prompt(&task(), &[], &[], "g", 1, &PromptConfig::default()).unwrap();
        let fb: Vec<_> = (0..8).map(diag).collect();
        let cfg = PromptConfig { feedback_cap: 8, context_budget: base.token_estimate + 20 };
        let p = compose_prompt(&task(), &[], &fb, "g", 2, &cfg).unwrap();
        let n = p.section(SectionKind::FailureFeedback).unwrap().lines().count() - 1;
        assert!(n < 8);
        assert!(p.render().contains("sig-7:x"));
    }

    const SCRIPT: &str = "\
preamble is ignored
=== task 1 iter 1
first
=== task 1 iter 2 when unique instance identifiers
gated
=== task 1 iter 2
ungated
=== task * iter 9
any task
=== terminal
THE END
";

    #[test]
    fn scripted_lookup() {
        let b = ScriptedBackend::parse(SCRIPT).unwrap();
        assert_eq!(b.respond(1, 1, ""), "first\n");
        assert_eq!(b.respond(1, 2, "use unique instance identifiers"), "gated\n");
        assert_eq!(b.respond(1, 2, "nothing"), "ungated\n");
        assert_eq!(b.respond(7, 9, ""), "any task\n");
        assert_eq!(b.respond(1, 3, ""), "THE END");
        let bare = ScriptedBackend::parse("=== task 1 iter 1\nx\n").unwrap();
        assert_eq!(bare.respond(1, 2, ""), TERMINAL_RESPONSE);
        assert!(ScriptedBackend::parse("=== job 1\n").is_err());

        let p = compose_prompt(&task(), &[], &[], "g", 1, &PromptConfig::default()).unwrap();
        let g = generate(&b, 1, 1, &p).unwrap();
        assert_eq!(g.source_text, "first\n");
        assert_eq!(g.token_cost, (estimate_tokens(&p.render()) + 2) as u64);
    }

    #[test]
    fn unreachable_endpoint_times_out() {
        let mut h = HttpBackend::new("http://127.0.0.1:9/v1/chat/completions", "m");
        h.timeout_secs = 2;
        let p = compose_prompt(&task(), &[], &[], "g", 1, &PromptConfig::default()).unwrap();
        assert!(matches!(generate(&h, 1, 1, &p), Err(BackendError::BackendTimeout(_))));
    }

    #[test]
    fn extraction_takes_first_fence() {
        let t = "Here you go:\n```spice\nR1 a 0 1k\n```\ntrailing\n```\nR2 b 0 1k\n```\n";
        assert_eq!(extract_netlist(t).unwrap(), "R1 a 0 1k\n");
        assert_eq!(extract_netlist("no code"), Err(ExtractError::NoFencedBlock));
        assert_eq!(extract_netlist("```\nR1 a 0 1\n"), Err(ExtractError::Unterminated));
        assert_eq!(extract_netlist(TERMINAL_RESPONSE), Err(ExtractError::NoFencedBlock));
    }

    struct Canned(&'static str);

    impl TextBackend for Canned {
        fn kind(&self) -> BackendKind {
            BackendKind::HttpApi
        }
        fn complete(&self, _: &Request<'_>) -> Result<Completion, BackendError> {
            Ok(Completion { text: self.0.into(), tokens: 5, audit: None })
        }
    }

    fn repeated_bundle() -> FeedbackBundle {
        let mut d = Diagnostic::new(Stage::Requirement, "duplicate-identifier:M1", "duplicate M1");
        d.suggested_fix = Some("assign globally unique instance identifiers within each scope".into());
        FeedbackBundle {
            task: task(),
            candidate: DesignCandidate::new(""),
            iteration: 2,
            outcome: ExecutionOutcome::default(),
            diagnostics: vec![d],
            pass: false,
            history: vec![IterationRecord { task_id: 1, iteration: 1, signatures: vec!["duplicate-identifier:M1".into()] }],
            promote: vec![],
            timestamp: 3,
        }
    }

    #[test]
    fn scripted_curation_is_distill() {
        let b = repeated_bundle();
        let cfg = MemoryConfig::default();
        let c = curate(&ScriptedBackend::default(), &b, &cfg);
        assert_eq!(c.entries, distill(&b, &cfg));
        assert_eq!(c.entries.len(), 1);
    }

    #[test]
    fn prose_falls_back_to_rules() {
        let b = repeated_bundle();
        let cfg = MemoryConfig::default();
        let c = curate(&Canned("I think the circuit looks fine overall."), &b, &cfg);
        assert_eq!(c.entries, distill(&b, &cfg));
        assert_eq!(c.fallback.as_deref(), Some("curator output has no rule records"));
    }

    #[test]
    fn backend_rules_still_pass_the_filter() {
        let b = repeated_bundle();
        let cfg = MemoryConfig::default();
        let c = curate(
            &Canned("RULE: outputs may use any node name\nSCOPE: Amplifier\nBASIS: RepeatedFailure\n\nRULE: keep W/L above 1\nSCOPE: Amplifier"),
            &b,
            &cfg,
        );
        assert_eq!(c.entries.len(), 3);
        let m = update(&MemoryState::default(), &c.entries, &b.task.constraints);
        assert!(m.entries().all(|e| e.rule != "outputs may use any node name"));
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn backend_cannot_admit_without_evidence() {
        let mut b = repeated_bundle();
        b.history.clear();
        let c = curate(&Canned("RULE: anything\n"), &b, &MemoryConfig::default());
        assert!(c.entries.is_empty());
    }

    proptest! {
        #[test]
        fn verbatim_injection_and_stable_requirements(
            rules in prop::collection::vec("[A-Za-z0-9 ,.:()=/-]{1,60}", 0..6),
            nfb in 0usize..6,
            it in 1u32..12,
        ) {
            let entries: Vec<_> = rules.iter().enumerate().map(|(i, r)| rule(r, i as u64)).collect();
            let fb: Vec<_> = (0..nfb).map(diag).collect();
            let cfg = PromptConfig::default();
            let p = compose_prompt(&task(), &entries, &fb, "g", it, &cfg).unwrap();
            let text = p.render();
            for e in &entries {
                prop_assert!(text.contains(&e.rule));
            }
            let first = compose_prompt(&task(), &[], &[], "other", 1, &cfg).unwrap();
            prop_assert_eq!(p.section(SectionKind::TaskRequirements), first.section(SectionKind::TaskRequirements));
            prop_assert_eq!(p.section(SectionKind::DesignInstruction), first.section(SectionKind::DesignInstruction));
            prop_assert_eq!(&p, &compose_prompt(&task(), &entries, &fb, "g", it, &cfg).unwrap());
        }
    }
}
