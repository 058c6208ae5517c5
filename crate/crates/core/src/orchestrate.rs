//! The generate, execute, diagnose, refine loop and the benchmark driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{compose_prompt, curate, extract_netlist, generate, AgentError, PromptConfig, TextBackend};
use crate::evalkit::{report, PassMode, ReportDocument, ReportOptions, TaskTally};
use crate::memory::{FeedbackBundle, IterationRecord, MemoryStore, StoreError};
use crate::model::{parse_task_file, Diagnostic, Difficulty, ExecutionOutcome, ResultBundle, Stage, TaskInstance};
use crate::sim::to_tsv;
use crate::tune::{extract_variables, tune_candidate, SearchSpace, TpeConfig, TuneResult};
use crate::verify::{bias_repair, diagnose, evaluate, render_feedback_log, DesignCandidate, FixCatalog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClockMode {
    /// Seconds of wall-clock time, backend latency included.
    Wall,
    /// Attempts consumed; makes reports reproducible byte for byte.
    Logical,
}

impl ClockMode {
    pub fn unit(self) -> &'static str {
        match self {
            ClockMode::Wall => "s",
            ClockMode::Logical => "attempts",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    /// Attempt budget K.
    pub k: u32,
    pub enable_bias_repair: bool,
    pub enable_tuning: bool,
    pub tune_budget: usize,
    pub tune_seed: u64,
    pub tpe: TpeConfig,
    pub prompt: PromptConfig,
    pub catalog: FixCatalog,
    pub clock: ClockMode,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            k: 30,
            enable_bias_repair: true,
            enable_tuning: false,
            tune_budget: 50,
            tune_seed: 0,
            tpe: TpeConfig::default(),
            prompt: PromptConfig::default(),
            catalog: FixCatalog::default(),
            clock: ClockMode::Wall,
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestrateError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] AgentError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("workspace {path}")]
    Workspace {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn ws_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestrateError + '_ {
    move |source| OrchestrateError::Workspace {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-run artifact directory. Files are created once and never replaced.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn create(root: &Path) -> Result<Self, OrchestrateError> {
        fs::create_dir_all(root).map_err(ws_err(root))?;
        Ok(Workspace { root: root.to_path_buf() })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, OrchestrateError> {
        let path = self.root.join(name);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(ws_err(&path))?;
        f.write_all(contents.as_bytes()).map_err(ws_err(&path))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub task: TaskInstance,
    pub attempts: u32,
    pub observations: Vec<ExecutionOutcome>,
    pub subgoal: String,
    pub success: bool,
    pub first_success_at: Option<u32>,
    pub ttfs: Option<f64>,
    pub cumulative_tokens: u64,
    pub tokens_to_success: Option<u64>,
    /// Verdict of each attempt.
    pub per_attempt: Vec<bool>,
    /// Store version seen by each iteration's retrieval.
    pub store_versions: Vec<u64>,
    pub final_candidate: Option<DesignCandidate>,
    /// Entries this run added to the store.
    pub curated: usize,
    pub tuning: Option<TuneResult>,
}

pub const FIRST_SUBGOAL: &str = "produce a candidate satisfying all interface constraints (Ω) and functional targets (Φ)";

/// g_i from (S, O): the fixed opening goal, then the distinct signatures of
/// the most recent failing observation, in log order.
pub fn next_subgoal(_task: &TaskInstance, observations: &[ExecutionOutcome]) -> String {
    let Some(last) = observations
        .iter()
        .rev()
        .find(|o| o.program_error || o.simulator_error || !o.diagnostic_log.is_empty())
    else {
        return FIRST_SUBGOAL.to_string();
    };
    let mut seen = BTreeSet::new();
    let sigs: Vec<&str> = last
        .diagnostic_log
        .iter()
        .map(|d| d.signature.as_str())
        .filter(|s| seen.insert(*s))
        .collect();
    format!("resolve: {}", sigs.join(", "))
}

fn runtime_failure(signature: &str, evidence: String) -> ExecutionOutcome {
    let mut o = ExecutionOutcome {
        program_error: true,
        ..ExecutionOutcome::default()
    };
    o.push_diagnostic(Diagnostic::new(Stage::Runtime, signature, evidence));
    o
}

/// Curves grouped by shared grid, one table per group.
fn curve_tables(prefix: &str, grid_name: &str, curves: &BTreeMap<String, crate::model::Curve>) -> Vec<(String, String)> {
    let mut groups: Vec<(&Vec<f64>, Vec<(String, Vec<f64>)>)> = Vec::new();
    for (name, c) in curves {
        match groups.iter_mut().find(|(g, _)| **g == c.grid) {
            Some((_, cols)) => cols.push((name.clone(), c.samples.clone())),
            None => groups.push((&c.grid, vec![(name.clone(), c.samples.clone())])),
        }
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, (g, cols))| {
            let name = if i == 0 { format!("{prefix}.tsv") } else { format!("{prefix}_{}.tsv", i + 1) };
            (name, to_tsv(grid_name, g, &cols))
        })
        .collect()
}

fn waveform_tables(i: u32, z: &ResultBundle) -> Vec<(String, String)> {
    let mut out = curve_tables(&format!("dc_{i}"), "sweep", &z.sweeps);
    out.extend(curve_tables(&format!("tran_{i}"), "time", &z.transients));
    for (k, (node, r)) in z.ac_responses.iter().enumerate() {
        let name = if k == 0 { format!("ac_{i}.tsv") } else { format!("ac_{i}_{}.tsv", k + 1) };
        let cols = vec![(format!("{node}_db"), r.mag_db.clone()), (format!("{node}_deg"), r.phase_deg.clone())];
        out.push((name, to_tsv("freq", &r.freqs, &cols)));
    }
    out
}

#[derive(Serialize)]
struct CurationRecord<'a> {
    store_version_before: u64,
    store_version_after: u64,
    fallback: Option<&'a str>,
    proposed: Vec<&'a str>,
    rejected: Vec<String>,
}

/// Catalog fixes of earlier failures, distinct and in first-seen order. A
/// pass after those failures is the evidence that the fixes work.
fn resolved_fixes(feedback: &[Diagnostic]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    feedback
        .iter()
        .filter_map(|d| d.suggested_fix.clone())
        .filter(|f| seen.insert(f.clone()))
        .collect()
}

/// One task under the loop: at most `cfg.k` generate calls. `history` holds
/// the failure signatures seen so far and is extended in place.
pub fn run_task(
    task: &TaskInstance,
    backend: &dyn TextBackend,
    store: &MemoryStore,
    history: &mut Vec<IterationRecord>,
    cfg: &LoopConfig,
    ws: Option<&Workspace>,
) -> Result<RunState, OrchestrateError> {
    if cfg.k == 0 {
        return Err(OrchestrateError::Config("K must be at least 1".into()));
    }
    task.validate().map_err(|e| OrchestrateError::Config(e.to_string()))?;
    let write = |name: &str, text: &str| -> Result<(), OrchestrateError> {
        match ws {
            Some(w) => w.write(name, text).map(|_| ()),
            None => Ok(()),
        }
    };
    if ws.is_some() {
        write("task.txt", &crate::model::render_task_file(task))?;
    }
    let start = Instant::now();
    let mut st = RunState {
        task: task.clone(),
        attempts: 0,
        observations: Vec::new(),
        subgoal: String::new(),
        success: false,
        first_success_at: None,
        ttfs: None,
        cumulative_tokens: 0,
        tokens_to_success: None,
        per_attempt: Vec::new(),
        store_versions: Vec::new(),
        final_candidate: None,
        curated: 0,
        tuning: None,
    };
    let mut feedback: Vec<Diagnostic> = Vec::new();
    let mut subgoals = String::new();
    while st.attempts < cfg.k {
        let t = st.attempts + 1;
        st.subgoal = next_subgoal(task, &st.observations);
        subgoals.push_str(&format!("{t}\t{}\n", st.subgoal));
        st.store_versions.push(store.version());
        let retrieved = store.retrieve(&task.task_type);
        let prompt = compose_prompt(task, &retrieved, &feedback, &st.subgoal, t, &cfg.prompt)?;
        let rendered = prompt.render();
        write(&format!("prompt_{t}.txt"), &rendered)?;
        write(
            &format!("retrieved_{t}.json"),
            &serde_json::to_string_pretty(&retrieved).expect("entries serialize"),
        )?;

        st.attempts = t;
        let (mut outcome, mut pass, candidate) = match generate(backend, task.task_id, t, &prompt) {
            Err(e) => {
                write(&format!("candidate_{t}.cir"), &format!("* no candidate: {}\n", e.signature()))?;
                (runtime_failure(e.signature(), e.to_string()), false, None)
            }
            Ok(g) => {
                st.cumulative_tokens += g.token_cost;
                write(&format!("response_{t}.txt"), &g.source_text)?;
                if let Some(a) = &g.audit {
                    write(&format!("audit_{t}.txt"), a)?;
                }
                match extract_netlist(&g.source_text) {
                    Err(e) => {
                        write(&format!("candidate_{t}.cir"), "* no candidate: extraction failed\n")?;
                        let mut o = runtime_failure("extraction-failed:response", e.to_string());
                        o.token_cost = g.token_cost;
                        (o, false, None)
                    }
                    Ok(src) => {
                        write(&format!("candidate_{t}.cir"), &src)?;
                        let cand = DesignCandidate {
                            source: src,
                            iteration: t,
                            prompt_hash: prompt.hash(),
                            bias_point: None,
                        };
                        let (mut o, v) = evaluate(task, &cand);
                        o.token_cost = g.token_cost;
                        write(&format!("verdict_{t}.json"), &v.to_log_line())?;
                        (o, v.pass, Some(cand))
                    }
                }
            }
        };
        let mut accepted = candidate.clone();
        if !pass && cfg.enable_bias_repair && task.is_transfer_curve() {
            if let Some(c) = &candidate {
                match bias_repair(task, c) {
                    Ok(sibling) => {
                        let (o2, v2) = evaluate(task, &sibling);
                        write(&format!("candidate_{t}_bias.cir"), &sibling.source)?;
                        write(&format!("verdict_{t}_bias.json"), &v2.to_log_line())?;
                        if v2.pass {
                            outcome = ExecutionOutcome {
                                token_cost: outcome.token_cost,
                                ..o2
                            };
                            pass = true;
                            accepted = Some(sibling);
                        }
                    }
                    Err(e) => outcome.push_diagnostic(e.diagnostic()),
                }
            }
        }
        for (name, text) in waveform_tables(t, &outcome.measurements) {
            write(&name, &text)?;
        }
        let diags = if pass {
            Vec::new()
        } else {
            diagnose(&outcome, &cfg.catalog).unwrap_or_default()
        };
        write(&format!("feedback_{t}.log"), &render_feedback_log(&diags))?;

        history.push(IterationRecord {
            task_id: task.task_id,
            iteration: t,
            signatures: diags.iter().map(|d| d.signature.clone()).collect(),
        });
        let bundle = FeedbackBundle {
            task: task.clone(),
            candidate: accepted.clone().unwrap_or_else(|| DesignCandidate::new("")),
            iteration: t,
            outcome: outcome.clone(),
            diagnostics: diags.clone(),
            pass,
            history: history.clone(),
            promote: if pass { resolved_fixes(&feedback) } else { Vec::new() },
            timestamp: store.version() + 1,
        };
        let cur = curate(backend, &bundle, &store.config);
        st.cumulative_tokens += cur.tokens;
        if !cur.entries.is_empty() {
            let before = store.version();
            let rejected = store.commit(&cur.entries, &task.constraints)?;
            let added = cur.entries.len() - rejected.len();
            st.curated += added;
            let record = CurationRecord {
                store_version_before: before,
                store_version_after: store.version(),
                fallback: cur.fallback.as_deref(),
                proposed: cur.entries.iter().map(|e| e.rule.as_str()).collect(),
                rejected: rejected.iter().map(|r| format!("{}: {:?}", r.entry_id, r.reason)).collect(),
            };
            write(
                &format!("curation_{t}.json"),
                &serde_json::to_string_pretty(&record).expect("record serializes"),
            )?;
        }

        feedback.extend(diags);
        st.per_attempt.push(pass);
        st.observations.push(outcome);
        if pass {
            st.success = true;
            st.first_success_at = Some(t);
            st.ttfs = Some(match cfg.clock {
                ClockMode::Wall => start.elapsed().as_secs_f64(),
                ClockMode::Logical => f64::from(t),
            });
            st.tokens_to_success = Some(st.cumulative_tokens);
            st.final_candidate = accepted;
            break;
        }
    }
    write("subgoals.txt", &subgoals)?;
    if st.success && cfg.enable_tuning {
        let cand = st.final_candidate.clone().expect("passing candidate");
        let n = crate::netlist::parse(&cand.source).map_err(|e| OrchestrateError::Config(e.to_string()))?;
        let space = SearchSpace::new(extract_variables(&n), cfg.tune_budget, cfg.tune_seed);
        if space.validate().is_ok() {
            let dir = ws.map(|w| w.root.join("tune"));
            if let Ok((r, tuned)) = tune_candidate(task, &cand, &space, &cfg.tpe, dir.as_deref()) {
                if r.improved {
                    write("candidate_tuned.cir", &tuned.source)?;
                    st.final_candidate = Some(tuned);
                }
                st.tuning = Some(r);
            }
        }
    }
    Ok(st)
}

/// Read every `*.task` file in `dir`, ordered by task id.
pub fn load_tasks(dir: &Path) -> Result<Vec<TaskInstance>, OrchestrateError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(ws_err(dir))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "task"))
        .collect();
    paths.sort();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(ws_err(&p))?;
        let t = parse_task_file(&text).map_err(|e| OrchestrateError::Config(format!("{}: {e}", p.display())))?;
        out.push(t);
    }
    out.sort_by_key(|t| t.task_id);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_samples: usize,
    pub trials: u32,
    pub isolated_memory: bool,
    pub looping: LoopConfig,
    pub mode: PassMode,
    pub ks: Vec<usize>,
    /// Stop after this many newly completed runs (to exercise resumption).
    pub stop_after: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_samples: 30,
            trials: 1,
            isolated_memory: false,
            looping: LoopConfig::default(),
            mode: PassMode::Sample,
            ks: vec![1, 5],
            stop_after: None,
        }
    }
}

/// One completed run, as persisted for resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trial: u32,
    pub task_id: u32,
    pub run: usize,
    pub attempts: Vec<bool>,
    pub ttfs: Option<f64>,
    pub tokens_to_success: Option<u64>,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub records: Vec<RunRecord>,
    pub tallies: Vec<TaskTally>,
    /// False when `stop_after` ended the run early.
    pub complete: bool,
    pub report: ReportDocument,
}

pub const PROGRESS_FILE: &str = "progress.jsonl";
pub const STORE_FILE: &str = "memory.playbook";

fn read_progress(path: &Path) -> Result<Vec<RunRecord>, OrchestrateError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(ws_err(path))?;
    // A torn final line is a run that did not finish.
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

fn append_progress(path: &Path, r: &RunRecord) -> Result<(), OrchestrateError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(ws_err(path))?;
    let line = serde_json::to_string(r).expect("record serializes");
    writeln!(f, "{line}").map_err(ws_err(path))?;
    f.sync_data().map_err(ws_err(path))
}

/// Move an unfinished run directory aside instead of writing into it.
fn fresh_run_dir(dir: &Path) -> Result<Workspace, OrchestrateError> {
    if dir.exists() {
        let mut n = 1;
        let aside = loop {
            let p = dir.with_extension(format!("interrupted{n}"));
            if !p.exists() {
                break p;
            }
            n += 1;
        };
        fs::rename(dir, &aside).map_err(ws_err(dir))?;
    }
    Workspace::create(dir)
}

/// Run every task `n_samples` times per trial under `out`. Completed runs
/// are appended to `progress.jsonl`, so a second call resumes where an
/// interrupted one stopped. Shared memory lives in `memory.playbook`;
/// isolated runs each start from an empty store.
pub fn run_benchmark(
    tasks: &[TaskInstance],
    backend: &dyn TextBackend,
    cfg: &BenchConfig,
    out: &Path,
) -> Result<BenchResult, OrchestrateError> {
    fs::create_dir_all(out).map_err(ws_err(out))?;
    let progress = out.join(PROGRESS_FILE);
    let mut records = read_progress(&progress)?;
    let done: BTreeSet<(u32, u32, usize)> = records.iter().map(|r| (r.trial, r.task_id, r.run)).collect();
    let conventions: Vec<_> = tasks.iter().flat_map(|t| t.constraints.all_conventions()).collect();
    let shared = if cfg.isolated_memory {
        None
    } else {
        let path = out.join(STORE_FILE);
        if !path.exists() {
            crate::memory::persist(&Default::default(), &path)?;
        }
        Some(MemoryStore::open(&path, conventions.clone(), Default::default())?)
    };
    let mut shared_history: Vec<IterationRecord> = if cfg.isolated_memory {
        Vec::new()
    } else {
        records.iter().flat_map(|r| r.history.iter().cloned()).collect()
    };
    let mut fresh_runs = 0;
    let mut complete = true;
    'outer: for trial in 0..cfg.trials {
        for task in tasks {
            for run in 0..cfg.n_samples {
                if done.contains(&(trial, task.task_id, run)) {
                    continue;
                }
                if cfg.stop_after.is_some_and(|s| fresh_runs >= s) {
                    complete = false;
                    break 'outer;
                }
                let ws = fresh_run_dir(&out.join(format!("trial_{trial}/task_{}/run_{run}", task.task_id)))?;
                let isolated;
                let (store, mut local_history) = match &shared {
                    Some(s) => (s, None),
                    None => {
                        isolated = MemoryStore::in_memory(conventions.clone(), Default::default());
                        (&isolated, Some(Vec::new()))
                    }
                };
                let before = shared_history.len();
                let history = local_history.as_mut().unwrap_or(&mut shared_history);
                let st = run_task(task, backend, store, history, &cfg.looping, Some(&ws))?;
                let new_history = match &local_history {
                    Some(h) => h.clone(),
                    None => shared_history[before..].to_vec(),
                };
                let rec = RunRecord {
                    trial,
                    task_id: task.task_id,
                    run,
                    attempts: st.per_attempt,
                    ttfs: st.ttfs,
                    tokens_to_success: st.tokens_to_success,
                    history: new_history,
                };
                append_progress(&progress, &rec)?;
                records.push(rec);
                fresh_runs += 1;
            }
        }
    }
    let order: BTreeMap<u32, usize> = tasks.iter().enumerate().map(|(i, t)| (t.task_id, i)).collect();
    records.sort_by_key(|r| (r.trial, order.get(&r.task_id).copied(), r.run));
    let tallies = tally(&records, cfg.looping.k as usize);
    let difficulty: BTreeMap<u32, Difficulty> = tasks.iter().map(|t| (t.task_id, t.difficulty)).collect();
    let report = report(
        &tallies,
        &difficulty,
        &ReportOptions {
            mode: cfg.mode,
            ks: cfg.ks.clone(),
            ttfs_unit: cfg.looping.clock.unit().into(),
            memory: if cfg.isolated_memory { "isolated" } else { "shared" }.into(),
        },
    );
    Ok(BenchResult {
        records,
        tallies,
        complete,
        report,
    })
}

/// Fold run records into per-(trial, task) tallies, in record order.
pub fn tally(records: &[RunRecord], k: usize) -> Vec<TaskTally> {
    let mut out: Vec<TaskTally> = Vec::new();
    for r in records {
        let pos = out.iter().position(|t| t.trial == r.trial && t.task_id == r.task_id);
        let t = match pos {
            Some(i) => &mut out[i],
            None => {
                out.push(TaskTally::new(r.task_id, r.trial, k));
                out.last_mut().expect("just pushed")
            }
        };
        t.record(r.attempts.clone(), r.ttfs, r.tokens_to_success);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{BackendKind, Completion, Request, ScriptedBackend, BackendError};
    use crate::memory::MemoryConfig;
    use crate::model::{AssertionKind, ConstraintSet, FunctionalAssertion};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn divider_task(id: u32) -> TaskInstance {
        let mut c = ConstraintSet::default();
        c.required_node_names.insert("mid".into());
        TaskInstance {
            task_id: id,
            instruction: "Resistive divider: 5 V supply, mid node at half the supply.".into(),
            task_type: "Divider".into(),
            constraints: c,
            assertions: vec![FunctionalAssertion::new(AssertionKind::DCValueNear, "mid", [("value", 2.5)], 0.02).unwrap()],
            difficulty: Difficulty::Easy,
            transfer: None,
        }
    }

    fn fenced(body: &str) -> String {
        format!("```spice\n{body}```\n")
    }

    const GOOD: &str = "V1 vdd 0 5\nR1 vdd mid 10k\nR2 mid 0 10k\n.op\n";
    const DUPS: &str = "V1 vdd 0 5\nR1 vdd mid 10k\nR1 mid 0 10k\n.op\n";
    const FLOATING: &str = "V1 vdd 0 5\nR1 vdd mid 10k\nR2 mid 0 10k\nR3 f g 1k\n.op\n";

    struct Counting<B> {
        inner: B,
        calls: AtomicUsize,
    }

    impl<B: TextBackend> TextBackend for Counting<B> {
        fn kind(&self) -> BackendKind {
            self.inner.kind()
        }
        fn complete(&self, req: &Request<'_>) -> Result<Completion, BackendError> {
            if req.purpose == crate::agents::Purpose::Generate {
                self.calls.fetch_add(1, Ordering::SeqCst);
            }
            self.inner.complete(req)
        }
    }

    fn script(records: &[(&str, String)]) -> ScriptedBackend {
        let mut text = String::new();
        for (head, body) in records {
            text.push_str(&format!("=== {head}\n{body}"));
        }
        ScriptedBackend::parse(&text).unwrap()
    }

    fn store() -> MemoryStore {
        MemoryStore::in_memory(ConstraintSet::default().all_conventions(), MemoryConfig::default())
    }

    fn cfg(k: u32) -> LoopConfig {
        LoopConfig { k, clock: ClockMode::Logical, ..LoopConfig::default() }
    }

    #[test]
    fn three_step_trace() {
        let b = script(&[
            ("task 1 iter 1", fenced(DUPS)),
            ("task 1 iter 2", fenced(FLOATING)),
            ("task 1 iter 3", fenced(GOOD)),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(dir.path()).unwrap();
        let s = store();
        let mut h = Vec::new();
        let st = run_task(&divider_task(1), &b, &s, &mut h, &cfg(5), Some(&ws)).unwrap();

        // Step 1: duplicate R1, e=1, one Requirement diagnostic, nothing
        // admitted on a single occurrence.
        assert!(st.observations[0].program_error);
        let sigs: Vec<&str> = st.observations[0].diagnostic_log.iter().map(|d| d.signature.as_str()).collect();
        assert_eq!(sigs, ["duplicate-identifier:R1"]);
        assert_eq!(st.store_versions[0], 0);
        // Step 2: floating pair f/g, s=1 after the ladder; sub-goal names
        // the step-1 signatures.
        assert!(!st.observations[1].program_error && st.observations[1].simulator_error);
        assert_eq!(st.observations[1].diagnostic_log[0].stage, Stage::DCFeasibility);
        assert_eq!(st.store_versions[1], 0);
        // Step 3: pass; the fixes of steps 1 and 2 are promoted.
        assert_eq!(st.per_attempt, [false, false, true]);
        assert!(st.success);
        assert_eq!(st.first_success_at, Some(3));
        assert_eq!(st.subgoal, next_subgoal(&st.task, &st.observations[..2]));
        assert!(st.subgoal.starts_with("resolve: dc-nonconvergence:"));
        assert!(s.snapshot().entries().any(|e| e.rule == "assign globally unique instance identifiers within each scope"));
        assert!(st.curated >= 1);
        for i in 1..=3 {
            for f in ["candidate", "prompt", "feedback"] {
                let ext = match f { "candidate" => "cir", "prompt" => "txt", _ => "log" };
                assert!(dir.path().join(format!("{f}_{i}.{ext}")).exists(), "{f}_{i}");
            }
        }
        assert!(!dir.path().join("candidate_4.cir").exists());
        let p3 = fs::read_to_string(dir.path().join("prompt_3.txt")).unwrap();
        assert!(p3.contains("  fix: assign globally unique instance identifiers within each scope"));
        assert!(dir.path().join("curation_3.json").exists());
        // Write-once.
        assert!(ws.write("prompt_1.txt", "x").is_err());
    }

    #[test]
    fn first_shot_and_always_failing() {
        let b = script(&[("task * iter *", fenced(GOOD))]);
        let st = run_task(&divider_task(1), &b, &store(), &mut Vec::new(), &cfg(1), None).unwrap();
        assert_eq!((st.success, st.attempts, st.curated), (true, 1, 0));

        let bad = Counting { inner: script(&[("task * iter *", fenced(FLOATING))]), calls: AtomicUsize::new(0) };
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(dir.path()).unwrap();
        let st = run_task(&divider_task(1), &bad, &store(), &mut Vec::new(), &cfg(2), Some(&ws)).unwrap();
        assert_eq!((st.success, st.attempts), (false, 2));
        assert_eq!(bad.calls.load(Ordering::SeqCst), 2);
        let log = fs::read_to_string(dir.path().join("feedback_2.log")).unwrap();
        assert!(log.contains("dc-nonconvergence"));
    }

    #[test]
    fn exhausted_script_and_backend_errors_consume_attempts() {
        struct Down;
        impl TextBackend for Down {
            fn kind(&self) -> BackendKind {
                BackendKind::HttpApi
            }
            fn complete(&self, _: &Request<'_>) -> Result<Completion, BackendError> {
                Err(BackendError::QuotaExhausted("429".into()))
            }
        }
        let st = run_task(&divider_task(1), &Down, &store(), &mut Vec::new(), &cfg(3), None).unwrap();
        assert_eq!(st.attempts, 3);
        assert_eq!(st.observations[2].diagnostic_log[0].signature, "quota-exhausted");
        let st = run_task(&divider_task(1), &ScriptedBackend::default(), &store(), &mut Vec::new(), &cfg(2), None).unwrap();
        assert_eq!(st.observations[0].diagnostic_log[0].signature, "extraction-failed:response");
        assert_eq!(st.observations[0].diagnostic_log[0].stage, Stage::Runtime);
    }

    #[test]
    fn subgoal_floor() {
        let t = divider_task(1);
        assert_eq!(next_subgoal(&t, &[]), FIRST_SUBGOAL);
        let mut o = ExecutionOutcome::default();
        o.push_diagnostic(Diagnostic::new(Stage::Requirement, "a:x", "e"));
        assert_eq!(next_subgoal(&t, &[o.clone()]), "resolve: a:x");
        let mut o2 = ExecutionOutcome::default();
        for s in ["b:y", "c:z", "b:y", "d:w"] {
            o2.push_diagnostic(Diagnostic::new(Stage::Functional, s, "e"));
        }
        assert_eq!(next_subgoal(&t, &[o, o2, ExecutionOutcome::default()]), "resolve: b:y, c:z, d:w");
    }

    /// Reports the store version it was prompted under through the prompt
    /// text itself: the knowledge section grows by one line per commit.
    #[test]
    fn retrieval_sees_latest_version() {
        let seen = Mutex::new(Vec::new());
        struct Probe<'a>(&'a Mutex<Vec<usize>>);
        impl TextBackend for Probe<'_> {
            fn kind(&self) -> BackendKind {
                BackendKind::Scripted
            }
            fn complete(&self, req: &Request<'_>) -> Result<Completion, BackendError> {
                let k = req.prompt.split("## Relevant Knowledge\n").nth(1).unwrap().split("\n## ").next().unwrap();
                self.0.lock().unwrap().push(k.lines().filter(|l| l.starts_with("- ")).count());
                Ok(Completion { text: fenced(DUPS), tokens: 1, audit: None })
            }
        }
        let s = store();
        let st = run_task(&divider_task(1), &Probe(&seen), &s, &mut Vec::new(), &cfg(4), None).unwrap();
        for w in st.store_versions.windows(2) {
            assert!(w[1] >= w[0]);
        }
        // The repeat at iteration 2 is admitted, so iteration 3 sees it.
        assert_eq!(st.store_versions, [0, 0, 1, 1]);
        assert_eq!(seen.lock().unwrap().as_slice(), [0, 0, 1, 1]);
    }

    #[test]
    fn benchmark_tallies_resume_and_determinism() {
        let tasks = [divider_task(1), divider_task(2)];
        let b = script(&[
            ("task 1 iter *", fenced(GOOD)),
            ("task 2 iter 1", fenced(FLOATING)),
            ("task 2 iter 2", fenced(GOOD)),
        ]);
        let bc = BenchConfig { n_samples: 3, looping: cfg(5), ..BenchConfig::default() };
        let a = tempfile::tempdir().unwrap();
        let full = run_benchmark(&tasks, &b, &bc, a.path()).unwrap();
        assert_eq!(full.tallies.len(), 2);
        assert_eq!((full.tallies[0].n, full.tallies[0].c), (3, 3));
        assert_eq!((full.tallies[1].n, full.tallies[1].c), (3, 3));
        assert!(full.tallies[1].per_attempt_success.iter().all(|r| r == &vec![false, true]));

        let r = tempfile::tempdir().unwrap();
        let part = run_benchmark(&tasks, &b, &BenchConfig { stop_after: Some(4), ..bc.clone() }, r.path()).unwrap();
        assert!(!part.complete);
        assert_eq!(part.records.len(), 4);
        let resumed = run_benchmark(&tasks, &b, &bc, r.path()).unwrap();
        assert_eq!(resumed.tallies, full.tallies);
        assert_eq!(resumed.report.to_json(), full.report.to_json());
        assert_eq!(
            fs::read(a.path().join(STORE_FILE)).unwrap(),
            fs::read(r.path().join(STORE_FILE)).unwrap()
        );

        let z = tempfile::tempdir().unwrap();
        let empty = run_benchmark(&tasks, &b, &BenchConfig { n_samples: 0, ..bc }, z.path()).unwrap();
        assert!(empty.records.is_empty() && empty.report.tasks.is_empty());
    }
}
