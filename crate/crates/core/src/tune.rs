//! Post-feasibility parameter search with a Tree-structured Parzen
//! Estimator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{assertion_loss, evaluate_assertion, ExecutionOutcome, FunctionalAssertion, TaskInstance};
use crate::netlist::{apply_patch, emit, parse, DeviceKind, Netlist, ParamPatch};
use crate::verify::{evaluate, DesignCandidate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub device_id: String,
    pub param: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

impl Variable {
    pub fn new(device_id: &str, param: &str, lower: f64, upper: f64, scale: Scale) -> Result<Self, TuneError> {
        let v = Variable {
            device_id: device_id.into(),
            param: param.into(),
            lower,
            upper,
            scale,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn key(&self) -> String {
        format!("{}.{}", self.device_id, self.param)
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        let ok = self.lower.is_finite()
            && self.upper.is_finite()
            && self.lower < self.upper
            && (self.scale == Scale::Linear || self.lower > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TuneError::BadBounds(self.key()))
        }
    }

    /// Map into the space the density estimates live in.
    fn to_internal(&self, x: f64) -> f64 {
        match self.scale {
            Scale::Linear => x,
            Scale::Log => x.log10(),
        }
    }

    fn from_internal(&self, u: f64) -> f64 {
        let x = match self.scale {
            Scale::Linear => u,
            Scale::Log => 10f64.powf(u),
        };
        x.clamp(self.lower, self.upper)
    }

    fn internal_bounds(&self) -> (f64, f64) {
        (self.to_internal(self.lower), self.to_internal(self.upper))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub variables: Vec<Variable>,
    /// Assertions turned into the scalar loss; empty means the task's own.
    pub objective: Vec<FunctionalAssertion>,
    pub budget: usize,
    pub seed: u64,
}

impl SearchSpace {
    pub fn new(variables: Vec<Variable>, budget: usize, seed: u64) -> Self {
        SearchSpace {
            variables,
            objective: Vec::new(),
            budget,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        if self.variables.is_empty() {
            return Err(TuneError::EmptySpace);
        }
        self.variables.iter().try_for_each(Variable::validate)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.variables.len()
            && x.iter()
                .zip(&self.variables)
                .all(|(v, var)| *v >= var.lower && *v <= var.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    /// Bandwidth floor as a fraction of each variable's internal range.
    pub bandwidth_floor: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            bandwidth_floor: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    /// Values in variable order.
    pub values: Vec<f64>,
    pub loss: f64,
    /// The evaluation failed and `loss` is the penalty.
    pub failed: bool,
    pub outcome_ref: Option<String>,
}

impl Trial {
    pub fn assignment(&self, space: &SearchSpace) -> BTreeMap<String, f64> {
        space.variables.iter().map(Variable::key).zip(self.values.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuneError {
    #[error("search space has no variables")]
    EmptySpace,
    #[error("variable {0} has invalid bounds")]
    BadBounds(String),
    #[error("candidate does not pass before tuning")]
    NotFeasible,
    #[error("candidate does not parse: {0}")]
    Unparsable(String),
    #[error("cannot patch {0}")]
    Patch(String),
    #[error("workspace write failed: {0}")]
    Io(String),
}

/// Univariate Gaussian mixture truncated to `[lo, hi]`: one kernel per
/// observation plus a broad prior kernel (centre of the range, σ = range).
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    pub centers: Vec<f64>,
    pub bandwidth: f64,
    pub lo: f64,
    pub hi: f64,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    (-0.5 * ((x - mu) / sd).powi(2)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sd)
}

/// Silverman's rule of thumb, 0.9·min(σ, IQR/1.34)·n^(-1/5). Falls back to
/// σ when the interquartile range is zero.
pub fn silverman_bandwidth(points: &[f64]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let m = points.iter().sum::<f64>() / nf;
    let sd = (points.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let mut v = points.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (nf - 1.0);
        let i = pos.floor() as usize;
        let j = (i + 1).min(n - 1);
        v[i] + (pos - i as f64) * (v[j] - v[i])
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    0.9 * spread * nf.powf(-0.2)
}

impl Kde {
    /// Bandwidth is Silverman's, floored at `(hi - lo) / min(100, n + 1)`
    /// (wide while few points are known) and never below `floor · (hi - lo)`.
    pub fn fit(points: &[f64], lo: f64, hi: f64, floor: f64) -> Kde {
        let adaptive = 1.0 / (points.len() as f64 + 1.0).min(100.0);
        Kde {
            centers: points.to_vec(),
            bandwidth: silverman_bandwidth(points).max(floor.max(adaptive) * (hi - lo)),
            lo,
            hi,
        }
    }

    fn prior(&self) -> (f64, f64) {
        (0.5 * (self.lo + self.hi), self.hi - self.lo)
    }

    fn truncated(&self, x: f64, mu: f64, sd: f64) -> f64 {
        let mass = normal_cdf((self.hi - mu) / sd) - normal_cdf((self.lo - mu) / sd);
        normal_pdf(x, mu, sd) / mass.max(1e-300)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (pm, ps) = self.prior();
        let h = self.bandwidth;
        let total: f64 = self.centers.iter().map(|c| self.truncated(x, *c, h)).sum::<f64>() + self.truncated(x, pm, ps);
        total / (self.centers.len() + 1) as f64
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let k = rng.random_range(0..=self.centers.len());
        let (c, h) = match self.centers.get(k) {
            Some(c) => (*c, self.bandwidth),
            None => self.prior(),
        };
        for _ in 0..64 {
            let z: f64 = StandardNormal.sample(rng);
            let x = c + h * z;
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        c.clamp(self.lo, self.hi)
    }
}

/// Detailed result of one TPE step, exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Suggestion {
    pub values: Vec<f64>,
    /// Internal-space candidates drawn from the good density (empty during
    /// startup).
    pub candidates: Vec<Vec<f64>>,
    pub chosen: Option<usize>,
    /// (good, bad) estimates per variable.
    pub densities: Vec<(Kde, Kde)>,
}

fn uniform(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Vec<f64> {
    space
        .variables
        .iter()
        .map(|v| {
            let (lo, hi) = v.internal_bounds();
            v.from_internal(lo + (hi - lo) * rng.random::<f64>())
        })
        .collect()
}

/// log g(x) − log b(x) summed over variables (internal coordinates).
pub fn log_ratio(densities: &[(Kde, Kde)], x: &[f64]) -> f64 {
    densities
        .iter()
        .zip(x)
        .map(|((g, b), xi)| g.pdf(*xi).max(1e-300).ln() - b.pdf(*xi).max(1e-300).ln())
        .sum()
}

pub fn suggest_detailed(
    history: &[Trial],
    space: &SearchSpace,
    cfg: &TpeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Suggestion, TuneError> {
    space.validate()?;
    if history.len() < cfg.n_startup.max(2) {
        return Ok(Suggestion {
            values: uniform(space, rng),
            candidates: Vec::new(),
            chosen: None,
            densities: Vec::new(),
        });
    }
    let mut order: Vec<&Trial> = history.iter().collect();
    order.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)));
    let n_good = ((cfg.gamma * order.len() as f64).ceil() as usize).clamp(1, order.len() - 1);
    let (good, bad) = order.split_at(n_good);
    let densities: Vec<(Kde, Kde)> = space
        .variables
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let (lo, hi) = v.internal_bounds();
            let pts = |set: &[&Trial]| set.iter().map(|t| v.to_internal(t.values[j])).collect::<Vec<_>>();
            (
                Kde::fit(&pts(good), lo, hi, cfg.bandwidth_floor),
                Kde::fit(&pts(bad), lo, hi, cfg.bandwidth_floor),
            )
        })
        .collect();
    let candidates: Vec<Vec<f64>> = (0..cfg.n_candidates.max(1))
        .map(|_| densities.iter().map(|(g, _)| g.sample(rng)).collect())
        .collect();
    let mut chosen = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let r = log_ratio(&densities, c);
        if r > best {
            best = r;
            chosen = i;
        }
    }
    let values = space
        .variables
        .iter()
        .zip(&candidates[chosen])
        .map(|(v, u)| v.from_internal(*u))
        .collect();
    Ok(Suggestion {
        values,
        candidates,
        chosen: Some(chosen),
        densities,
    })
}

/// Next assignment, in variable order. Deterministic given `rng`.
pub fn suggest(history: &[Trial], space: &SearchSpace, cfg: &TpeConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, TuneError> {
    suggest_detailed(history, space, cfg, rng).map(|s| s.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: Trial,
    pub history: Vec<Trial>,
    /// False when every trial failed or none beat the baseline loss.
    pub improved: bool,
}

pub const INITIAL_PENALTY: f64 = 1e6;

fn penalty(history: &[Trial]) -> f64 {
    let worst = history
        .iter()
        .filter(|t| !t.failed)
        .map(|t| t.loss)
        .fold(f64::NEG_INFINITY, f64::max);
    if worst > 0.0 {
        10.0 * worst
    } else {
        INITIAL_PENALTY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sampler {
    Tpe,
    Random,
}

fn run_search<F>(
    space: &SearchSpace,
    cfg: &TpeConfig,
    sampler: Sampler,
    baseline: Option<f64>,
    mut eval: F,
) -> Result<TuneResult, TuneError>
where
    F: FnMut(usize, &[f64]) -> Option<f64>,
{
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let mut history: Vec<Trial> = Vec::with_capacity(space.budget);
    for index in 0..space.budget {
        let values = match sampler {
            Sampler::Tpe => suggest(&history, space, cfg, &mut rng)?,
            Sampler::Random => uniform(space, &mut rng),
        };
        let (loss, failed) = match eval(index, &values) {
            Some(l) if l.is_finite() => (l, false),
            _ => (penalty(&history), true),
        };
        history.push(Trial {
            index,
            values,
            loss,
            failed,
            outcome_ref: None,
        });
    }
    let best = history
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)))
        .cloned()
        .unwrap_or(Trial {
            index: 0,
            values: Vec::new(),
            loss: INITIAL_PENALTY,
            failed: true,
            outcome_ref: None,
        });
    let improved = !best.failed && baseline.is_none_or(|b| best.loss < b);
    Ok(TuneResult { best, history, improved })
}

/// Exactly `space.budget` evaluations of `eval`; `None` from `eval` marks a
/// failed trial, scored with the penalty loss.
pub fn optimize<F>(space: &SearchSpace, cfg: &TpeConfig, eval: F) -> Result<TuneResult, TuneError>
where
    F: FnMut(usize, &[f64]) -> Option<f64>,
{
    run_search(space, cfg, Sampler::Tpe, None, eval)
}

/// Uniform sampling over the same space, for comparison.
pub fn random_search<F>(space: &SearchSpace, eval: F) -> Result<TuneResult, TuneError>
where
    F: FnMut(usize, &[f64]) -> Option<f64>,
{
    run_search(space, &TpeConfig::default(), Sampler::Random, None, eval)
}

/// Sum of per-assertion losses, `None` if the run errored or any assertion
/// has no usable measurement.
pub fn objective_loss(objective: &[FunctionalAssertion], outcome: &ExecutionOutcome) -> Option<f64> {
    if outcome.program_error || outcome.simulator_error {
        return None;
    }
    objective.iter().try_fold(0.0, |acc, a| {
        let r = evaluate_assertion(a, &outcome.measurements).ok()?;
        Some(acc + assertion_loss(a, &r)?)
    })
}

pub fn patch_all(n: &Netlist, space: &SearchSpace, values: &[f64]) -> Result<Netlist, TuneError> {
    let mut out = n.clone();
    for (v, x) in space.variables.iter().zip(values) {
        out = apply_patch(
            &out,
            &ParamPatch {
                device_id: v.device_id.clone(),
                param: v.param.clone(),
                value: *x,
            },
        )
        .map_err(|e| TuneError::Patch(e.to_string()))?;
    }
    Ok(out)
}

/// Rule-based variable choice: every top-level R and C value over a
/// decade either side, and the W of every MOSFET that is not
/// diode-connected, over a factor of four either side.
pub fn extract_variables(n: &Netlist) -> Vec<Variable> {
    let mut out = Vec::new();
    for d in &n.devices {
        match d.kind {
            DeviceKind::R | DeviceKind::C if d.value() > 0.0 => {
                let v = d.value();
                out.push(Variable {
                    device_id: d.id.clone(),
                    param: "value".into(),
                    lower: v / 10.0,
                    upper: v * 10.0,
                    scale: Scale::Log,
                });
            }
            DeviceKind::Mosfet if !d.pins[0].eq_ignore_ascii_case(&d.pins[1]) => {
                if let Some(w) = d.param("w").filter(|w| *w > 0.0) {
                    out.push(Variable {
                        device_id: d.id.clone(),
                        param: "w".into(),
                        lower: w / 4.0,
                        upper: w * 4.0,
                        scale: Scale::Log,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

pub fn render_history(space: &SearchSpace, history: &[Trial]) -> String {
    let mut s = String::from("index");
    for v in &space.variables {
        let _ = write!(s, "\t{}", v.key());
    }
    s.push_str("\tloss\tfailed\toutcome_ref\n");
    for t in history {
        let _ = write!(s, "{}", t.index);
        for x in &t.values {
            let _ = write!(s, "\t{x:e}");
        }
        let _ = writeln!(
            s,
            "\t{:e}\t{}\t{}",
            t.loss,
            u8::from(t.failed),
            t.outcome_ref.as_deref().unwrap_or("-")
        );
    }
    s
}

fn write_new(path: &Path, text: &str) -> Result<(), TuneError> {
    std::fs::write(path, text).map_err(|e| TuneError::Io(format!("{}: {e}", path.display())))
}

/// Tune a passing candidate in place of its variables. Each trial's netlist
/// is archived as `trial_<i>.cir` under `workspace` along with
/// `tune_history.tsv`. Returns the best trial and the tuned candidate.
pub fn tune_candidate(
    task: &TaskInstance,
    cand: &DesignCandidate,
    space: &SearchSpace,
    cfg: &TpeConfig,
    workspace: Option<&Path>,
) -> Result<(TuneResult, DesignCandidate), TuneError> {
    space.validate()?;
    let (base_outcome, verdict) = evaluate(task, cand);
    if !verdict.pass {
        return Err(TuneError::NotFeasible);
    }
    let objective: &[FunctionalAssertion] = if space.objective.is_empty() {
        &task.assertions
    } else {
        &space.objective
    };
    let baseline = objective_loss(objective, &base_outcome);
    let base = parse(&cand.source).map_err(|e| TuneError::Unparsable(e.to_string()))?;
    patch_all(&base, space, &space.variables.iter().map(|v| v.lower).collect::<Vec<_>>())?;
    if let Some(dir) = workspace {
        std::fs::create_dir_all(dir).map_err(|e| TuneError::Io(e.to_string()))?;
    }
    let mut io_error = None;
    let mut result = run_search(space, cfg, Sampler::Tpe, baseline, |i, values| {
        let n = patch_all(&base, space, values).ok()?;
        let src = emit(&n);
        if let Some(dir) = workspace {
            if let Err(e) = write_new(&dir.join(format!("trial_{i}.cir")), &src) {
                io_error.get_or_insert(e);
            }
        }
        let (o, v) = evaluate(task, &DesignCandidate::new(src));
        if !v.pass {
            return None;
        }
        objective_loss(objective, &o)
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if let Some(dir) = workspace {
        for t in &mut result.history {
            t.outcome_ref = Some(format!("trial_{}.cir", t.index));
        }
        result.best.outcome_ref = Some(format!("trial_{}.cir", result.best.index));
        write_new(&dir.join("tune_history.tsv"), &render_history(space, &result.history))?;
    }
    let tuned = if result.improved {
        let n = patch_all(&base, space, &result.best.values)?;
        DesignCandidate {
            source: emit(&n),
            ..cand.clone()
        }
    } else {
        cand.clone()
    };
    Ok((result, tuned))
}

/// Path of the trial archive inside a workspace.
pub fn history_path(workspace: &Path) -> PathBuf {
    workspace.join("tune_history.tsv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AssertionKind, ConstraintSet, Difficulty};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn line_space(seed: u64, budget: usize) -> SearchSpace {
        SearchSpace::new(vec![Variable::new("X", "value", 0.0, 10.0, Scale::Linear).unwrap()], budget, seed)
    }

    fn quad(_: usize, x: &[f64]) -> Option<f64> {
        Some((x[0] - 3.0).powi(2))
    }

    #[test]
    fn bounds_validation() {
        assert!(Variable::new("R1", "value", 0.0, 1.0, Scale::Log).is_err());
        assert!(Variable::new("R1", "value", 2.0, 1.0, Scale::Linear).is_err());
        let empty = SearchSpace::new(vec![], 5, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(suggest(&[], &empty, &TpeConfig::default(), &mut rng), Err(TuneError::EmptySpace));
    }

    #[test]
    fn startup_is_uniform_in_bounds() {
        let s = line_space(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = suggest(&[], &s, &TpeConfig::default(), &mut rng).unwrap();
        assert!(s.contains(&x));
    }

    /// Two-sided Kolmogorov-Smirnov p-value (asymptotic series).
    fn ks_pvalue(d: f64, n: usize) -> f64 {
        let en = (n as f64).sqrt();
        let lambda = (en + 0.12 + 0.11 / en) * d;
        let mut p = 0.0;
        for j in 1..=100 {
            let j = j as f64;
            p += 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn log_scale_startup_is_log_uniform() {
        let s = SearchSpace::new(vec![Variable::new("C1", "value", 1e-12, 1e-6, Scale::Log).unwrap()], 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut u: Vec<f64> = (0..1000)
            .map(|_| (suggest(&[], &s, &TpeConfig::default(), &mut rng).unwrap()[0].log10() + 12.0) / 6.0)
            .collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let d = u
            .iter()
            .enumerate()
            .map(|(i, x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max);
        assert!(ks_pvalue(d, u.len()) > 0.01, "D = {d}");
    }

    #[test]
    fn chosen_candidate_maximizes_brute_force_ratio() {
        let s = line_space(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let history: Vec<Trial> = (0..30)
            .map(|i| {
                let x = 10.0 * rng.random::<f64>();
                Trial { index: i, values: vec![x], loss: (x - 3.0).powi(2), failed: false, outcome_ref: None }
            })
            .collect();
        let sug = suggest_detailed(&history, &s, &TpeConfig::default(), &mut rng).unwrap();
        // Oracle: refit both densities from scratch with plain loops.
        let mut sorted = history.clone();
        sorted.sort_by(|a, b| a.loss.total_cmp(&b.loss));
        let n_good = (0.25f64 * 30.0).ceil() as usize;
        let gauss = |x: f64, mu: f64, sd: f64| (-0.5 * ((x - mu) / sd).powi(2)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sd);
        // Truncation mass by midpoint integration over [0, 10].
        let mass = |mu: f64, sd: f64| (0..20000).map(|k| gauss((k as f64 + 0.5) * 5e-4, mu, sd) * 5e-4).sum::<f64>();
        let kde = |pts: &[f64], x: f64| {
            let n = pts.len() as f64;
            let m = pts.iter().sum::<f64>() / n;
            let sd = (pts.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (n - 1.0)).sqrt();
            let mut v = pts.to_vec();
            v.sort_by(f64::total_cmp);
            let quant = |p: f64| {
                let pos = p * (n - 1.0);
                let i = pos as usize;
                v[i] + (pos - i as f64) * (v[(i + 1).min(v.len() - 1)] - v[i])
            };
            let iqr = (quant(0.75) - quant(0.25)) / 1.34;
            let h = (0.9 * if iqr > 0.0 { sd.min(iqr) } else { sd } * n.powf(-0.2)).max(10.0 / (n + 1.0).min(100.0));
            let mut acc = gauss(x, 5.0, 10.0) / mass(5.0, 10.0);
            for c in pts {
                acc += gauss(x, *c, h) / mass(*c, h);
            }
            acc / (n + 1.0)
        };
        let good: Vec<f64> = sorted[..n_good].iter().map(|t| t.values[0]).collect();
        let bad: Vec<f64> = sorted[n_good..].iter().map(|t| t.values[0]).collect();
        let ratios: Vec<f64> = sug.candidates.iter().map(|c| kde(&good, c[0]) / kde(&bad, c[0])).collect();
        let chosen = ratios[sug.chosen.unwrap()];
        for r in &ratios {
            assert!(chosen >= r * (1.0 - 1e-5), "{chosen} < {r}");
        }
        assert_eq!(sug.values[0], sug.candidates[sug.chosen.unwrap()][0]);
    }

    #[test]
    fn quadratic_beats_random_and_finds_minimum() {
        let cfg = TpeConfig::default();
        let (mut hits, mut tpe_sum, mut rnd_sum) = (0, 0.0, 0.0);
        for seed in 0..20 {
            let s = line_space(seed, 50);
            let r = optimize(&s, &cfg, quad).unwrap();
            assert_eq!(r.history.len(), 50);
            hits += usize::from((r.best.values[0] - 3.0).abs() < 0.5);
            tpe_sum += r.best.loss;
            rnd_sum += random_search(&s, quad).unwrap().best.loss;
        }
        assert!(hits >= 19, "{hits}/20");
        assert!(tpe_sum <= rnd_sum, "{tpe_sum} vs {rnd_sum}");
    }

    #[test]
    fn budget_one_and_all_failed() {
        let r = optimize(&line_space(3, 1), &TpeConfig::default(), quad).unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.best, r.history[0]);
        let f = optimize(&line_space(3, 12), &TpeConfig::default(), |_, _| None).unwrap();
        assert!(f.best.failed);
        assert_eq!(f.best.loss, INITIAL_PENALTY);
        assert!(!f.improved);
    }

    #[test]
    fn penalty_is_ten_times_worst_feasible() {
        let mut calls = 0;
        let r = optimize(&line_space(5, 4), &TpeConfig::default(), |i, x| {
            calls += 1;
            (i != 2).then(|| (x[0] - 3.0).powi(2))
        })
        .unwrap();
        assert_eq!(calls, 4);
        let worst = r.history[..2].iter().map(|t| t.loss).fold(0.0, f64::max);
        assert_eq!(r.history[2].loss, 10.0 * worst);
        assert!(r.history[2].failed);
    }

    #[test]
    fn reproducible() {
        let s = line_space(11, 30);
        assert_eq!(optimize(&s, &TpeConfig::default(), quad), optimize(&s, &TpeConfig::default(), quad));
    }

    const AMP: &str = "\
.model mn nmos (vto=0.7 kp=200u lambda=0.01)
Vdd vdd 0 5
Vin in 0 DC 1 AC 1
RD vdd out 10k
M1 out in 0 0 mn W=10u L=1u
.ac dec 5 10 1k
";

    fn amp_task() -> TaskInstance {
        let mut c = ConstraintSet::default();
        c.required_node_names.insert("out".into());
        TaskInstance {
            task_id: 1,
            instruction: "cs amp".into(),
            task_type: "Amplifier".into(),
            constraints: c,
            assertions: vec![FunctionalAssertion::new(AssertionKind::GainAtLeast, "out", [("min_gain", 5.0)], 0.05).unwrap()],
            difficulty: Difficulty::Easy,
            transfer: None,
        }
    }

    #[test]
    fn extraction_and_loss_mapping() {
        let n = parse(AMP).unwrap();
        let v = extract_variables(&n);
        let keys: Vec<String> = v.iter().map(Variable::key).collect();
        assert_eq!(keys, ["RD.value", "M1.w"]);
        assert_eq!((v[0].lower, v[0].upper), (1e3, 1e5));

        let near = FunctionalAssertion::new(AssertionKind::DCValueNear, "out", [("value", 2.0)], 0.05).unwrap();
        let mut o = ExecutionOutcome::default();
        o.measurements.operating_point.node_voltages.insert("out".into(), 2.5);
        assert_eq!(objective_loss(&[near.clone()], &o), Some(0.25));
        let hinge = FunctionalAssertion::new(AssertionKind::GainAtLeast, "out", [("min_gain", 10.0)], 0.01).unwrap();
        let (o2, _) = evaluate(&amp_task(), &DesignCandidate::new(AMP));
        let gain = evaluate_assertion(&hinge, &o2.measurements).unwrap().observed;
        assert!(gain > 5.0);
        assert_eq!(objective_loss(&[hinge], &o2), Some((10.0 - gain).max(0.0) / 10.0));
        o.simulator_error = true;
        assert_eq!(objective_loss(&[near], &o), None);
    }

    #[test]
    fn tuning_archives_every_trial() {
        let dir = tempfile::tempdir().unwrap();
        let n = parse(AMP).unwrap();
        let mut space = SearchSpace::new(extract_variables(&n), 12, 2);
        space.objective = vec![FunctionalAssertion::new(AssertionKind::GainAtLeast, "out", [("min_gain", 40.0)], 0.01).unwrap()];
        let (r, tuned) = tune_candidate(&amp_task(), &DesignCandidate::new(AMP), &space, &TpeConfig::default(), Some(dir.path())).unwrap();
        for i in 0..12 {
            assert!(dir.path().join(format!("trial_{i}.cir")).exists());
        }
        let tsv = std::fs::read_to_string(history_path(dir.path())).unwrap();
        assert_eq!(tsv.lines().count(), 13);
        assert!(tsv.starts_with("index\tRD.value\tM1.w\tloss\tfailed\toutcome_ref\n"));
        assert!(r.history.iter().all(|t| space.contains(&t.values)));
        assert!(evaluate(&amp_task(), &tuned).1.pass);

        let bad = DesignCandidate::new(AMP.replace("DC 1", "DC 0"));
        assert_eq!(tune_candidate(&amp_task(), &bad, &space, &TpeConfig::default(), None).unwrap_err(), TuneError::NotFeasible);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn every_suggestion_in_bounds(
            bounds in prop::collection::vec((0.001f64..100.0, 1.01f64..50.0, any::<bool>()), 1..4),
            seed in any::<u64>(),
        ) {
            let vars: Vec<Variable> = bounds
                .iter()
                .enumerate()
                .map(|(i, (lo, f, log))| Variable::new(&format!("D{i}"), "value", *lo, lo * f, if *log { Scale::Log } else { Scale::Linear }).unwrap())
                .collect();
            let s = SearchSpace::new(vars, 25, seed);
            let r = optimize(&s, &TpeConfig::default(), |_, x| Some(x.iter().map(|v| v.ln().powi(2)).sum())).unwrap();
            prop_assert_eq!(r.history.len(), 25);
            for t in &r.history {
                prop_assert!(s.contains(&t.values));
            }
        }
    }
}
