//! Metrics and reports: Pass@k, cumulative success rate, time and tokens to
//! first success, difficulty-tier averages, improvement rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Difficulty;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})")]
    Domain { n: u64, c: u64, k: u64 },
    #[error("csr needs 1 <= k <= {width}, got {k}")]
    CsrDomain { k: usize, width: usize },
}

/// 1 − C(n−c, k)/C(n, k) as 1 − ∏_{i=n−c+1}^{n} (1 − k/i).
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EvalError> {
    if c > n || k == 0 || k > n {
        return Err(EvalError::Domain { n, c, k });
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    if k == 1 {
        return Ok(c as f64 / n as f64);
    }
    let mut miss = 1.0;
    for i in (n - c + 1..=n).rev() {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// How a Pass@k number was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassMode {
    /// Each run is one sample; it is valid when it ends in a pass.
    Sample,
    /// Pass@k is the cumulative success rate within the first k attempts.
    Attempt,
}

/// Outcomes of the `n` runs of one task in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTally {
    pub task_id: u32,
    pub trial: u32,
    pub n: u64,
    pub c: u64,
    /// One row per run, one column per attempt made (at most `width`).
    pub per_attempt_success: Vec<Vec<bool>>,
    /// The attempt budget K.
    pub width: usize,
    /// Time to first success of each successful run.
    pub ttfs_samples: Vec<f64>,
    /// Tokens spent up to first success of each successful run.
    pub token_samples: Vec<u64>,
}

impl TaskTally {
    pub fn new(task_id: u32, trial: u32, width: usize) -> Self {
        TaskTally {
            task_id,
            trial,
            n: 0,
            c: 0,
            per_attempt_success: Vec::new(),
            width,
            ttfs_samples: Vec::new(),
            token_samples: Vec::new(),
        }
    }

    /// Record a run. `attempts[i]` is the verdict of attempt i+1.
    pub fn record(&mut self, attempts: Vec<bool>, ttfs: Option<f64>, tokens_to_success: Option<u64>) {
        let success = attempts.iter().any(|b| *b);
        self.n += 1;
        self.c += u64::from(success);
        self.per_attempt_success.push(attempts);
        if success {
            self.ttfs_samples.extend(ttfs);
            self.token_samples.extend(tokens_to_success);
        }
    }

    pub fn pass_at(&self, mode: PassMode, k: usize) -> Result<f64, EvalError> {
        match mode {
            PassMode::Sample => pass_at_k(self.n, self.c, k as u64),
            PassMode::Attempt => csr(self, k),
        }
    }
}

/// Fraction of runs with a success among their first `k` attempts.
pub fn csr(t: &TaskTally, k: usize) -> Result<f64, EvalError> {
    if k == 0 || k > t.width {
        return Err(EvalError::CsrDomain { k, width: t.width });
    }
    if t.per_attempt_success.is_empty() {
        return Ok(0.0);
    }
    let hits = t
        .per_attempt_success
        .iter()
        .filter(|row| row.iter().take(k).any(|b| *b))
        .count();
    Ok(hits as f64 / t.per_attempt_success.len() as f64)
}

/// Relative improvement of `ours` over `baseline`, in percent.
pub fn improvement(ours: f64, baseline: f64) -> f64 {
    (ours - baseline) / baseline * 100.0
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1); `None` below two values.
pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    fn of(v: &[f64]) -> Option<Stat> {
        (!v.is_empty()).then(|| Stat {
            mean: mean(v),
            std: sample_std(v),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: u32,
    pub difficulty: Option<Difficulty>,
    pub trials: usize,
    pub n: u64,
    pub c: u64,
    /// (k, Pass@k over trials), as fractions.
    pub pass_at: Vec<(usize, Stat)>,
    /// CSR(1..=K) pooled over trials.
    pub csr: Vec<f64>,
    pub mean_ttfs: Option<f64>,
    pub mean_tokens: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRow {
    pub tier: String,
    pub tasks: usize,
    /// Pass@1 tier average, mean ± std over trials.
    pub pass1: Stat,
    /// `None` renders as NA: some task in the tier was never solved.
    pub mean_ttfs: Option<f64>,
    pub mean_tokens: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub mode: PassMode,
    pub ks: Vec<usize>,
    /// Unit of the time-to-first-success column ("s" or "attempts").
    pub ttfs_unit: String,
    pub memory: String,
    pub std_kind: String,
    pub tasks: Vec<TaskRow>,
    pub tiers: Vec<TierRow>,
    pub overall: TierRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub mode: PassMode,
    pub ks: Vec<usize>,
    pub ttfs_unit: String,
    pub memory: String,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            mode: PassMode::Sample,
            ks: vec![1, 5],
            ttfs_unit: "s".into(),
            memory: "shared".into(),
        }
    }
}

fn tier_row(name: &str, rows: &[&TaskRow], per_trial: &BTreeMap<u32, Vec<f64>>) -> TierRow {
    let trial_means: Vec<f64> = per_trial.values().map(|v| mean(v)).collect();
    let all = |f: fn(&TaskRow) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
        v.filter(|v| !v.is_empty()).map(|v| mean(&v))
    };
    TierRow {
        tier: name.to_string(),
        tasks: rows.len(),
        pass1: Stat::of(&trial_means).unwrap_or(Stat { mean: 0.0, std: None }),
        mean_ttfs: all(|r| r.mean_ttfs),
        mean_tokens: all(|r| r.mean_tokens),
    }
}

/// Aggregate tallies into per-task rows, per-tier rows and an overall row.
/// Pass@k values whose k exceeds a tally's n are left out of its mean.
pub fn report(tallies: &[TaskTally], difficulty: &BTreeMap<u32, Difficulty>, opts: &ReportOptions) -> ReportDocument {
    let mut by_task: BTreeMap<u32, Vec<&TaskTally>> = BTreeMap::new();
    for t in tallies {
        by_task.entry(t.task_id).or_default().push(t);
    }
    let mut rows = Vec::new();
    // tier -> trial -> Pass@1 of each task
    let mut tier_trials: BTreeMap<Option<Difficulty>, BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    let mut overall_trials: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (task_id, ts) in &by_task {
        let d = difficulty.get(task_id).copied();
        let pass_at = opts
            .ks
            .iter()
            .filter_map(|&k| {
                let v: Vec<f64> = ts.iter().filter_map(|t| t.pass_at(opts.mode, k).ok()).collect();
                Stat::of(&v).map(|s| (k, s))
            })
            .collect();
        for t in ts {
            if let Ok(p) = t.pass_at(opts.mode, 1) {
                tier_trials.entry(d).or_default().entry(t.trial).or_default().push(p);
                overall_trials.entry(t.trial).or_default().push(p);
            }
        }
        let width = ts.iter().map(|t| t.width).max().unwrap_or(0);
        let runs: Vec<&Vec<bool>> = ts.iter().flat_map(|t| &t.per_attempt_success).collect();
        let csr_row = (1..=width)
            .map(|k| {
                if runs.is_empty() {
                    0.0
                } else {
                    runs.iter().filter(|r| r.iter().take(k).any(|b| *b)).count() as f64 / runs.len() as f64
                }
            })
            .collect();
        let ttfs: Vec<f64> = ts.iter().flat_map(|t| t.ttfs_samples.iter().copied()).collect();
        let tokens: Vec<f64> = ts.iter().flat_map(|t| t.token_samples.iter().map(|x| *x as f64)).collect();
        rows.push(TaskRow {
            task_id: *task_id,
            difficulty: d,
            trials: ts.len(),
            n: ts.iter().map(|t| t.n).sum(),
            c: ts.iter().map(|t| t.c).sum(),
            pass_at,
            csr: csr_row,
            mean_ttfs: (!ttfs.is_empty()).then(|| mean(&ttfs)),
            mean_tokens: (!tokens.is_empty()).then(|| mean(&tokens)),
        });
    }
    let tiers = tier_trials
        .iter()
        .map(|(d, per_trial)| {
            let members: Vec<&TaskRow> = rows.iter().filter(|r| r.difficulty == *d).collect();
            tier_row(d.map_or("Unrated", Difficulty::as_str), &members, per_trial)
        })
        .collect();
    let overall = tier_row("Overall", &rows.iter().collect::<Vec<_>>(), &overall_trials);
    ReportDocument {
        mode: opts.mode,
        ks: opts.ks.clone(),
        ttfs_unit: opts.ttfs_unit.clone(),
        memory: opts.memory.clone(),
        std_kind: "sample (n-1)".into(),
        tasks: rows,
        tiers,
        overall,
    }
}

/// One decimal, as a percentage.
pub fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn stat_pct(s: &Stat) -> String {
    match s.std {
        Some(sd) => format!("{} ± {}", pct(s.mean), pct(sd)),
        None => pct(s.mean),
    }
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.digits$}"))
}

impl ReportDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn pass_at_for(&self, task_id: u32, k: usize) -> Option<f64> {
        self.tasks
            .iter()
            .find(|r| r.task_id == task_id)?
            .pass_at
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, s)| s.mean)
    }

    /// Plain-text tables. `ks` narrows the Pass@k columns; empty keeps all.
    pub fn render_text(&self, ks: &[usize], baseline: Option<&ReportDocument>) -> String {
        let ks: Vec<usize> = if ks.is_empty() { self.ks.clone() } else { ks.to_vec() };
        let mode = match self.mode {
            PassMode::Sample => "sample",
            PassMode::Attempt => "attempt",
        };
        let mut s = format!(
            "mode: {mode}; memory: {}; std: {}; ttfs unit: {}\n\n",
            self.memory, self.std_kind, self.ttfs_unit
        );
        s.push_str("task\ttier\truns\tsolved");
        for k in &ks {
            let _ = write!(s, "\tpass@{k}");
        }
        s.push_str("\tttfs\ttokens\n");
        for r in &self.tasks {
            let _ = write!(
                s,
                "{}\t{}\t{}\t{}",
                r.task_id,
                r.difficulty.map_or("-", Difficulty::as_str),
                r.n,
                r.c
            );
            for k in &ks {
                let cell = r.pass_at.iter().find(|(kk, _)| kk == k).map_or("-".into(), |(_, st)| stat_pct(st));
                let _ = write!(s, "\t{cell}");
            }
            let _ = writeln!(s, "\t{}\t{}", opt(r.mean_ttfs, 2), opt(r.mean_tokens, 0));
        }
        s.push_str("\ntier\ttasks\tpass@1\tttfs\ttokens\n");
        for t in self.tiers.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                t.tier,
                t.tasks,
                stat_pct(&t.pass1),
                opt(t.mean_ttfs, 2),
                opt(t.mean_tokens, 0)
            );
        }
        if let Some(b) = baseline {
            let _ = writeln!(
                s,
                "\nImp\t{:.1}",
                improvement(self.overall.pass1.mean, b.overall.pass1.mean)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn binom(n: u64, k: u64) -> f64 {
        if k > n {
            return 0.0;
        }
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn table_pairs() {
        assert_eq!(pct(pass_at_k(30, 1, 5).unwrap()), "16.7");
        assert_eq!(pct(pass_at_k(30, 8, 5).unwrap()), "81.5");
        // 1 - C(22,5)/C(30,5) = 1 - 26334/142506
        assert!((pass_at_k(30, 8, 5).unwrap() - (1.0 - 26334.0 / 142506.0)).abs() < 1e-15);
        for n in 1..20 {
            assert_eq!(pass_at_k(n, 0, 1).unwrap(), 0.0);
            assert_eq!(pass_at_k(n, n, n).unwrap(), 1.0);
        }
        assert_eq!(pass_at_k(30, 4, 27).unwrap(), 1.0);
        assert!(pass_at_k(5, 6, 1).is_err());
        assert!(pass_at_k(5, 1, 0).is_err());
        assert!(pass_at_k(5, 1, 6).is_err());
    }

    #[test]
    fn large_n_is_stable() {
        let p = pass_at_k(10_000, 37, 100).unwrap();
        // Oracle: log-gamma free ratio of binomials through logs.
        let ln_ratio: f64 = (0..100).map(|i| ((10_000 - 37 - i) as f64).ln() - ((10_000 - i) as f64).ln()).sum();
        assert!((p - (1.0 - ln_ratio.exp())).abs() < 1e-12);
        assert!(p.is_finite() && p > 0.0 && p < 1.0);
    }

    #[test]
    fn brute_force_subsets() {
        for n in 1..=12u64 {
            for c in 0..=n {
                for k in 1..=n {
                    let (mut avoid, mut all) = (0u64, 0u64);
                    for mask in 0u32..(1 << n) {
                        if mask.count_ones() as u64 == k {
                            all += 1;
                            // successes are the low c bits
                            if mask & ((1u32 << c) - 1) == 0 {
                                avoid += 1;
                            }
                        }
                    }
                    let want = 1.0 - avoid as f64 / all as f64;
                    assert!((pass_at_k(n, c, k).unwrap() - want).abs() < 1e-12, "{n} {c} {k}");
                    assert!((want - (1.0 - binom(n - c, k) / binom(n, k))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn monotone_lattice_and_k1() {
        for n in 1..=60u64 {
            for c in 0..=n {
                assert_eq!(pass_at_k(n, c, 1).unwrap(), c as f64 / n as f64);
                for k in 1..=n {
                    let p = pass_at_k(n, c, k).unwrap();
                    if c < n {
                        assert!(pass_at_k(n, c + 1, k).unwrap() >= p);
                    }
                    if k < n {
                        assert!(pass_at_k(n, c, k + 1).unwrap() >= p);
                    }
                    if c >= 1 && n - c < n {
                        assert_eq!(pass_at_k(n, c, n - c + 1).unwrap(), 1.0);
                    }
                }
            }
        }
    }

    fn tally(rows: &[&[bool]]) -> TaskTally {
        let mut t = TaskTally::new(1, 0, rows.iter().map(|r| r.len()).max().unwrap_or(1));
        for r in rows {
            t.record(r.to_vec(), None, None);
        }
        t
    }

    #[test]
    fn csr_examples() {
        let t = tally(&[&[false, true], &[true, false]]);
        assert_eq!(csr(&t, 1).unwrap(), 0.5);
        assert_eq!(csr(&t, 2).unwrap(), 1.0);
        let z = tally(&[&[false, false], &[false, false]]);
        assert_eq!((csr(&z, 1).unwrap(), csr(&z, 2).unwrap()), (0.0, 0.0));
        assert!(csr(&t, 3).is_err());
        assert!(csr(&t, 0).is_err());
    }

    #[test]
    fn csr_random_matrix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m: Vec<Vec<bool>> = (0..100).map(|_| (0..30).map(|_| rng.random::<f64>() < 0.04).collect()).collect();
        let mut t = TaskTally::new(1, 0, 30);
        for r in &m {
            t.record(r.clone(), None, None);
        }
        let mut last = 0.0;
        for k in 1..=30 {
            let mut count = 0;
            for r in &m {
                let mut hit = false;
                for j in 0..k {
                    hit = hit || r[j];
                }
                count += usize::from(hit);
            }
            let v = csr(&t, k).unwrap();
            assert_eq!(v, count as f64 / 100.0);
            assert!(v >= last);
            last = v;
        }
        assert_eq!(csr(&t, 30).unwrap(), t.c as f64 / t.n as f64);
    }

    #[test]
    fn imp_row() {
        assert_eq!(format!("{:.1}", improvement(97.4, 92.0)), "5.9");
    }

    fn solved(task: u32, trial: u32, n: usize, c: usize) -> TaskTally {
        let mut t = TaskTally::new(task, trial, 3);
        for i in 0..n {
            let ok = i < c;
            t.record(vec![ok], ok.then_some(2.0), ok.then_some(100));
        }
        t
    }

    #[test]
    fn tiers_and_na() {
        let d: BTreeMap<u32, Difficulty> = [(1, Difficulty::Easy), (2, Difficulty::Medium), (3, Difficulty::Medium)].into();
        let mut tallies: Vec<TaskTally> = (0..5).map(|tr| solved(1, tr, 4, 4)).collect();
        tallies.push(solved(2, 0, 4, 2));
        tallies.push(solved(3, 0, 4, 0));
        let r = report(&tallies, &d, &ReportOptions::default());
        let easy = r.tiers.iter().find(|t| t.tier == "Easy").unwrap();
        assert_eq!(easy.pass1, Stat { mean: 1.0, std: Some(0.0) });
        assert_eq!(stat_pct(&easy.pass1), "100.0 ± 0.0");
        assert_eq!(easy.mean_ttfs, Some(2.0));
        let med = r.tiers.iter().find(|t| t.tier == "Medium").unwrap();
        assert_eq!(med.mean_ttfs, None);
        assert_eq!(med.pass1.mean, 0.25);
        assert!(r.render_text(&[1], None).contains("Medium\t2\t25.0\tNA\tNA"));
        assert_eq!(r.overall.mean_ttfs, None);
    }

    #[test]
    fn empty_report() {
        let r = report(&[], &BTreeMap::new(), &ReportOptions::default());
        assert!(r.tasks.is_empty() && r.tiers.is_empty());
    }

    proptest! {
        #[test]
        fn report_round_trips_bit_exactly(
            spec in prop::collection::vec((1u32..6, 0u32..3, 1usize..8, 0usize..8, 0.0f64..1e3), 1..12)
        ) {
            let tallies: Vec<TaskTally> = spec
                .iter()
                .map(|(task, trial, n, c, ttfs)| {
                    let mut t = TaskTally::new(*task, *trial, 2);
                    for i in 0..*n {
                        let ok = i < (*c).min(*n);
                        t.record(vec![false, ok], ok.then_some(*ttfs / (i + 1) as f64), ok.then_some(7 * i as u64));
                    }
                    t
                })
                .collect();
            let d: BTreeMap<u32, Difficulty> = (1..6).map(|i| (i, if i < 3 { Difficulty::Easy } else { Difficulty::Hard })).collect();
            let r = report(&tallies, &d, &ReportOptions::default());
            let back = ReportDocument::from_json(&r.to_json()).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(back.to_json(), r.to_json());
        }
    }
}
