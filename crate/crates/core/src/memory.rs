//! The rule playbook: curated entries, the admission-controlled update
//! `Dedup(Filter(M ‖ Δ))`, three-arm retrieval, and a checksummed,
//! append-structured store file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConstraintSet, Convention, Diagnostic, ExecutionOutcome, Stage, TaskInstance};
use crate::util::{escape_line, sha256_hex, unescape_line};
use crate::verify::DesignCandidate;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    General,
    TaskType(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdmissionBasis {
    RepeatedFailure,
    CheckerViolationMultiple,
    StableDesignPractice,
}

impl AdmissionBasis {
    pub fn as_str(self) -> &'static str {
        match self {
            AdmissionBasis::RepeatedFailure => "RepeatedFailure",
            AdmissionBasis::CheckerViolationMultiple => "CheckerViolationMultiple",
            AdmissionBasis::StableDesignPractice => "StableDesignPractice",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            AdmissionBasis::RepeatedFailure,
            AdmissionBasis::CheckerViolationMultiple,
            AdmissionBasis::StableDesignPractice,
        ]
        .into_iter()
        .find(|b| b.as_str() == s)
    }
}

/// Where an entry came from. `timestamp` is a logical clock value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_id: u32,
    pub iteration: u32,
    pub timestamp: u64,
}

/// One curated rule: Trigger -> Evidence -> Rule -> Applicability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybookEntry {
    pub entry_id: String,
    pub scope: Scope,
    pub trigger: String,
    pub evidence: String,
    pub rule: String,
    pub applicability: String,
    pub provenance: Provenance,
    pub admission_basis: AdmissionBasis,
}

/// Lowercase, collapse whitespace, drop digits.
pub fn normalize_rule(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_digit())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn entry_id_for(rule: &str) -> String {
    sha256_hex(normalize_rule(rule).as_bytes())[..16].to_string()
}

impl PlaybookEntry {
    pub fn new(
        scope: Scope,
        trigger: impl Into<String>,
        evidence: impl Into<String>,
        rule: impl Into<String>,
        applicability: impl Into<String>,
        provenance: Provenance,
        admission_basis: AdmissionBasis,
    ) -> Self {
        let rule = rule.into();
        PlaybookEntry {
            entry_id: entry_id_for(&rule),
            scope,
            trigger: trigger.into(),
            evidence: evidence.into(),
            rule,
            applicability: applicability.into(),
            provenance,
            admission_basis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Maximum rule length in characters.
    pub rule_max_len: usize,
    /// Maximum entries returned by retrieval.
    pub retrieve_cap: usize,
    /// Maximum total rule characters returned by retrieval.
    pub retrieve_budget: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            rule_max_len: 400,
            retrieve_cap: 12,
            retrieve_budget: 2000,
        }
    }
}

/// M_t. Lists are append-only; `version` counts commits that appended.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryState {
    pub general: Vec<PlaybookEntry>,
    pub by_type: BTreeMap<String, Vec<PlaybookEntry>>,
    pub version: u64,
}

impl MemoryState {
    pub fn len(&self) -> usize {
        self.general.len() + self.by_type.values().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = &PlaybookEntry> {
        self.general.iter().chain(self.by_type.values().flatten())
    }

    pub fn contains(&self, entry_id: &str) -> bool {
        self.entries().any(|e| e.entry_id == entry_id)
    }
}

/// One iteration's failure signatures, as seen by the curator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub task_id: u32,
    pub iteration: u32,
    pub signatures: Vec<String>,
}

/// Everything the curator sees after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub task: TaskInstance,
    pub candidate: DesignCandidate,
    pub iteration: u32,
    pub outcome: ExecutionOutcome,
    /// Diagnostics with fixes attached.
    pub diagnostics: Vec<Diagnostic>,
    pub pass: bool,
    /// Earlier iterations of this and other tasks.
    pub history: Vec<IterationRecord>,
    /// Rule texts the curator tagged as stable practice.
    pub promote: Vec<String>,
    pub timestamp: u64,
}

fn truncate_chars(s: &str, cap: usize) -> String {
    match s.char_indices().nth(cap) {
        Some((i, _)) => s[..i].to_string(),
        None => s.to_string(),
    }
}

fn scope_for(stage: Stage, task_type: &str) -> Scope {
    match stage {
        Stage::Requirement | Stage::Runtime | Stage::DCFeasibility => Scope::General,
        Stage::DCSweep | Stage::Functional | Stage::Waveform => Scope::TaskType(task_type.to_string()),
    }
}

fn rule_text(d: &Diagnostic) -> String {
    match &d.suggested_fix {
        Some(fix) => fix.clone(),
        None => format!("avoid {}: {}", d.signature, d.evidence),
    }
}

/// Rule-based curation: admit a rule only with repeated evidence.
///
/// - RepeatedFailure: the signature also failed in another iteration of this
///   task, or in another task.
/// - CheckerViolationMultiple: this iteration violates one structural rule
///   at two or more sites.
/// - StableDesignPractice: rules the curator tagged in `promote`.
pub fn distill(b: &FeedbackBundle, cfg: &MemoryConfig) -> Vec<PlaybookEntry> {
    let tt = b.task.task_type.as_str();
    let prov = Provenance {
        task_id: b.task.task_id,
        iteration: b.iteration,
        timestamp: b.timestamp,
    };
    let mut out: Vec<PlaybookEntry> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |e: PlaybookEntry, out: &mut Vec<PlaybookEntry>| {
        if !e.rule.trim().is_empty() && seen.insert(e.entry_id.clone()) {
            out.push(e);
        }
    };

    if !b.pass {
        let mut class_count: BTreeMap<&str, usize> = BTreeMap::new();
        for d in b.diagnostics.iter().filter(|d| d.stage == Stage::Requirement) {
            *class_count.entry(d.signature_class()).or_default() += 1;
        }
        for d in &b.diagnostics {
            let earlier = b
                .history
                .iter()
                .filter(|r| !(r.task_id == b.task.task_id && r.iteration == b.iteration))
                .filter(|r| r.signatures.iter().any(|s| s == &d.signature));
            let (mut iters, mut tasks) = (BTreeSet::new(), BTreeSet::new());
            for r in earlier {
                if r.task_id == b.task.task_id {
                    iters.insert(r.iteration);
                } else {
                    tasks.insert(r.task_id);
                }
            }
            let multiple = d.stage == Stage::Requirement && class_count[d.signature_class()] >= 2;
            let basis = if multiple {
                AdmissionBasis::CheckerViolationMultiple
            } else if !iters.is_empty() || !tasks.is_empty() {
                AdmissionBasis::RepeatedFailure
            } else {
                continue;
            };
            let scope = scope_for(d.stage, tt);
            let applicability = match &scope {
                Scope::General => "every generated netlist".to_string(),
                Scope::TaskType(t) => format!("{t} designs"),
            };
            push(
                PlaybookEntry::new(
                    scope,
                    format!("{tt} / {}", d.signature_class()),
                    d.evidence.clone(),
                    truncate_chars(&rule_text(d), cfg.rule_max_len),
                    applicability,
                    prov.clone(),
                    basis,
                ),
                &mut out,
            );
        }
    }
    for rule in &b.promote {
        push(
            PlaybookEntry::new(
                Scope::TaskType(tt.to_string()),
                format!("{tt} / verified design"),
                format!("iteration {} passed all checks", b.iteration),
                truncate_chars(rule, cfg.rule_max_len),
                format!("{tt} designs"),
                prov.clone(),
                AdmissionBasis::StableDesignPractice,
            ),
            &mut out,
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    Duplicate,
    Conflict { convention: String, pattern: String },
    EmptyRule,
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub entry_id: String,
    pub reason: RejectReason,
}

/// First registered convention whose negation pattern the rule matches.
pub fn conflicting_convention<'a>(rule: &str, conventions: &'a [Convention]) -> Option<(&'a str, &'a str)> {
    let text = normalize_rule(rule);
    conventions.iter().find_map(|c| {
        c.negation_patterns
            .iter()
            .find(|p| {
                let p = normalize_rule(p);
                !p.is_empty() && text.contains(&p)
            })
            .map(|p| (c.id.as_str(), p.as_str()))
    })
}

/// Dedup(Filter(m ‖ delta; omega)) with the rejections it made.
pub fn update_logged(
    m: &MemoryState,
    delta: &[PlaybookEntry],
    omega: &ConstraintSet,
    registered: &[Convention],
    cfg: &MemoryConfig,
) -> (MemoryState, Vec<Rejection>) {
    let mut conventions = registered.to_vec();
    conventions.extend(omega.all_conventions());
    let mut next = m.clone();
    let mut ids: BTreeSet<String> = m.entries().map(|e| e.entry_id.clone()).collect();
    let mut rejected = Vec::new();
    let mut appended = false;
    for e in delta {
        let reason = if e.rule.trim().is_empty() {
            Some(RejectReason::EmptyRule)
        } else if e.rule.chars().count() > cfg.rule_max_len {
            Some(RejectReason::TooLong)
        } else if let Some((c, p)) = conflicting_convention(&e.rule, &conventions) {
            Some(RejectReason::Conflict {
                convention: c.to_string(),
                pattern: p.to_string(),
            })
        } else if ids.contains(&e.entry_id) {
            Some(RejectReason::Duplicate)
        } else {
            None
        };
        if let Some(reason) = reason {
            tracing::debug!(entry = %e.entry_id, ?reason, "playbook entry rejected");
            rejected.push(Rejection {
                entry_id: e.entry_id.clone(),
                reason,
            });
            continue;
        }
        ids.insert(e.entry_id.clone());
        match &e.scope {
            Scope::General => next.general.push(e.clone()),
            Scope::TaskType(t) => next.by_type.entry(t.clone()).or_default().push(e.clone()),
        }
        appended = true;
    }
    if appended {
        next.version += 1;
    }
    (next, rejected)
}

pub fn update(m: &MemoryState, delta: &[PlaybookEntry], omega: &ConstraintSet) -> MemoryState {
    update_logged(m, delta, omega, &[], &MemoryConfig::default()).0
}

/// Which branch of the retrieval rule selected the type-specific list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalArm {
    Exact(String),
    Substring(String),
    Empty,
}

/// Exact key match wins; otherwise the shortest key contained in `tau`,
/// ties broken lexicographically; otherwise nothing.
pub fn retrieval_arm(m: &MemoryState, tau: &str) -> RetrievalArm {
    if m.by_type.contains_key(tau) {
        return RetrievalArm::Exact(tau.to_string());
    }
    m.by_type
        .keys()
        .filter(|k| !k.is_empty() && tau.contains(k.as_str()))
        .min_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)))
        .map(|k| RetrievalArm::Substring(k.clone()))
        .unwrap_or(RetrievalArm::Empty)
}

fn by_recency(list: &[PlaybookEntry]) -> Vec<&PlaybookEntry> {
    let mut v: Vec<(usize, &PlaybookEntry)> = list.iter().enumerate().collect();
    // Newest first; among equal timestamps the later append first.
    v.sort_by(|(i, a), (j, b)| {
        b.provenance
            .timestamp
            .cmp(&a.provenance.timestamp)
            .then(j.cmp(i))
    });
    v.into_iter().map(|(_, e)| e).collect()
}

/// r(τ): General entries, then the selected task-type entries, each newest
/// first, truncated to the entry cap and the text budget.
pub fn retrieve(m: &MemoryState, tau: &str, cfg: &MemoryConfig) -> Vec<PlaybookEntry> {
    let typed: &[PlaybookEntry] = match retrieval_arm(m, tau) {
        RetrievalArm::Exact(k) | RetrievalArm::Substring(k) => &m.by_type[&k],
        RetrievalArm::Empty => &[],
    };
    let mut out = Vec::new();
    let mut used = 0;
    for e in by_recency(&m.general).into_iter().chain(by_recency(typed)) {
        let len = e.rule.chars().count();
        if out.len() == cfg.retrieve_cap || used + len > cfg.retrieve_budget {
            break;
        }
        used += len;
        out.push(e.clone());
    }
    out
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("i/o failure on {path}")]
    IOFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const MAGIC: &str = "# analog-loop playbook v1";

fn render_entry(out: &mut String, e: &PlaybookEntry) {
    use std::fmt::Write as _;
    let _ = writeln!(out, "- id: {}", e.entry_id);
    let _ = writeln!(out, "  trigger: {}", escape_line(&e.trigger));
    let _ = writeln!(out, "  evidence: {}", escape_line(&e.evidence));
    let _ = writeln!(out, "  rule: {}", escape_line(&e.rule));
    let _ = writeln!(out, "  applicability: {}", escape_line(&e.applicability));
    let _ = writeln!(
        out,
        "  provenance: {} {} {}",
        e.provenance.task_id, e.provenance.iteration, e.provenance.timestamp
    );
    let _ = writeln!(out, "  basis: {}", e.admission_basis.as_str());
}

fn render_body(m: &MemoryState) -> String {
    let mut body = String::from("[General Rules]\n");
    for e in &m.general {
        render_entry(&mut body, e);
    }
    for (label, list) in &m.by_type {
        body.push_str(&format!("[Task-Type Rules: {}]\n", escape_line(label)));
        for e in list {
            render_entry(&mut body, e);
        }
    }
    body
}

fn checksum(version: u64, body: &str) -> String {
    sha256_hex(format!("version = {version}\n{body}").as_bytes())
}

/// The store file: magic line, version, checksum, then the sections.
pub fn render_store(m: &MemoryState) -> String {
    let body = render_body(m);
    format!(
        "{MAGIC}\nversion = {}\nchecksum = {}\n{body}",
        m.version,
        checksum(m.version, &body)
    )
}

fn corrupt(msg: impl fmt::Display) -> StoreError {
    StoreError::CorruptStore(msg.to_string())
}

pub fn parse_store(text: &str) -> Result<MemoryState, StoreError> {
    let mut lines = text.split_inclusive('\n');
    let mut header = |what: &str| -> Result<String, StoreError> {
        let l = lines.next().ok_or_else(|| corrupt(format!("missing {what}")))?;
        Ok(l.trim_end_matches('\n').to_string())
    };
    if header("magic line")? != MAGIC {
        return Err(corrupt("bad magic line"));
    }
    let version: u64 = header("version")?
        .strip_prefix("version = ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("bad version line"))?;
    let sum = header("checksum")?
        .strip_prefix("checksum = ")
        .map(str::to_string)
        .ok_or_else(|| corrupt("bad checksum line"))?;
    let body: String = lines.collect();
    if checksum(version, &body) != sum {
        return Err(corrupt("checksum mismatch"));
    }

    let mut m = MemoryState {
        version,
        ..MemoryState::default()
    };
    let mut scope: Option<Scope> = None;
    let mut fields: Vec<(String, String)> = Vec::new();
    let flush = |m: &mut MemoryState, scope: &Option<Scope>, fields: &mut Vec<(String, String)>| -> Result<(), StoreError> {
        if fields.is_empty() {
            return Ok(());
        }
        let scope = scope.clone().ok_or_else(|| corrupt("entry outside a section"))?;
        let get = |k: &str| -> Result<String, StoreError> {
            let raw = fields
                .iter()
                .find(|(f, _)| f == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| corrupt(format!("entry missing {k}")))?;
            unescape_line(raw).ok_or_else(|| corrupt(format!("bad escape in {k}")))
        };
        let prov: Vec<u64> = get("provenance")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| corrupt("bad provenance")))
            .collect::<Result<_, _>>()?;
        let [task_id, iteration, timestamp] = prov[..] else {
            return Err(corrupt("bad provenance"));
        };
        let e = PlaybookEntry {
            entry_id: get("id")?,
            scope: scope.clone(),
            trigger: get("trigger")?,
            evidence: get("evidence")?,
            rule: get("rule")?,
            applicability: get("applicability")?,
            provenance: Provenance {
                task_id: u32::try_from(task_id).map_err(|_| corrupt("bad task id"))?,
                iteration: u32::try_from(iteration).map_err(|_| corrupt("bad iteration"))?,
                timestamp,
            },
            admission_basis: AdmissionBasis::parse(&get("basis")?)
                .ok_or_else(|| corrupt("unknown admission basis"))?,
        };
        match scope {
            Scope::General => m.general.push(e),
            Scope::TaskType(t) => m.by_type.entry(t).or_default().push(e),
        }
        fields.clear();
        Ok(())
    };
    for line in body.lines() {
        if line == "[General Rules]" {
            flush(&mut m, &scope, &mut fields)?;
            scope = Some(Scope::General);
        } else if let Some(label) = line
            .strip_prefix("[Task-Type Rules: ")
            .and_then(|r| r.strip_suffix(']'))
        {
            flush(&mut m, &scope, &mut fields)?;
            let label = unescape_line(label).ok_or_else(|| corrupt("bad section label"))?;
            m.by_type.entry(label.clone()).or_default();
            scope = Some(Scope::TaskType(label));
        } else if let Some(id) = line.strip_prefix("- id: ") {
            flush(&mut m, &scope, &mut fields)?;
            fields.push(("id".into(), id.to_string()));
        } else if let Some((k, v)) = line.strip_prefix("  ").and_then(|l| l.split_once(": ")) {
            if fields.is_empty() {
                return Err(corrupt("field outside an entry"));
            }
            fields.push((k.to_string(), v.to_string()));
        } else {
            return Err(corrupt(format!("unexpected line '{line}'")));
        }
    }
    flush(&mut m, &scope, &mut fields)?;
    Ok(m)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::IOFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Write atomically: temp file in the same directory, fsync, rename.
pub fn persist(m: &MemoryState, path: &Path) -> Result<(), StoreError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile_in(dir, path)?;
    tmp.1
        .write_all(render_store(m).as_bytes())
        .and_then(|_| tmp.1.sync_all())
        .map_err(io_err(&tmp.0))?;
    fs::rename(&tmp.0, path).map_err(io_err(path))
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(PathBuf, fs::File), StoreError> {
    let stem = target
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "store".into());
    for k in 0u32.. {
        let p = dir.join(format!(".{stem}.{}.{k}.tmp", std::process::id()));
        match fs::OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(f) => return Ok((p, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&p)(e)),
        }
    }
    unreachable!()
}

pub fn load(path: &Path) -> Result<MemoryState, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_store(&text)
}

/// Single-writer, multi-reader handle on a store file. Readers get the
/// last committed state; commits are serialized and hit disk before they
/// become visible.
pub struct MemoryStore {
    path: Option<PathBuf>,
    state: RwLock<MemoryState>,
    writer: Mutex<()>,
    registered: Vec<Convention>,
    pub config: MemoryConfig,
}

impl MemoryStore {
    /// Open (or create empty) the store at `path`.
    pub fn open(path: &Path, registered: Vec<Convention>, config: MemoryConfig) -> Result<Self, StoreError> {
        let state = if path.exists() { load(path)? } else { MemoryState::default() };
        Ok(MemoryStore {
            path: Some(path.to_path_buf()),
            state: RwLock::new(state),
            writer: Mutex::new(()),
            registered,
            config,
        })
    }

    /// A store that never touches disk.
    pub fn in_memory(registered: Vec<Convention>, config: MemoryConfig) -> Self {
        MemoryStore {
            path: None,
            state: RwLock::new(MemoryState::default()),
            writer: Mutex::new(()),
            registered,
            config,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn snapshot(&self) -> MemoryState {
        self.state.read().expect("store lock").clone()
    }

    pub fn version(&self) -> u64 {
        self.state.read().expect("store lock").version
    }

    pub fn retrieve(&self, tau: &str) -> Vec<PlaybookEntry> {
        retrieve(&self.state.read().expect("store lock"), tau, &self.config)
    }

    /// Apply one update and persist it; returns the rejections.
    pub fn commit(&self, delta: &[PlaybookEntry], omega: &ConstraintSet) -> Result<Vec<Rejection>, StoreError> {
        let _w = self.writer.lock().expect("writer lock");
        let current = self.snapshot();
        let (next, rejected) = update_logged(&current, delta, omega, &self.registered, &self.config);
        if next != current {
            if let Some(p) = &self.path {
                persist(&next, p)?;
            }
            *self.state.write().expect("store lock") = next;
        }
        Ok(rejected)
    }
}
