//! Newton-Raphson with the convergence-aid ladder, operating point and DC
//! sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::circuit::{Circuit, Elem, StampCtx};
use super::devices::{mos_eval, MosRegion};
use super::linalg::{solve, Singular};
use super::{SimError, Tolerances};
use crate::netlist::check::floating_nodes;
use crate::netlist::{DeviceKind, Netlist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Direct,
    GminStepping,
    DynamicGmin,
    SourceStepping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Newton iterations summed over every strategy attempted.
    pub iterations: usize,
    pub strategy_trace: Vec<Strategy>,
    /// Largest KCL imbalance at the last iterate, in amperes.
    pub max_residual: f64,
    pub failure_nodes: Vec<String>,
}

impl SolveReport {
    /// One-line log form, in the style of SPICE's convergence messages.
    pub fn summary(&self) -> String {
        let trace: Vec<String> = self
            .strategy_trace
            .iter()
            .map(|s| format!("{s:?}"))
            .collect();
        if self.converged {
            format!(
                "converged after {} iterations via {}",
                self.iterations,
                trace.join(" -> ")
            )
        } else {
            format!(
                "iteration limit reached; tried {}; singular matrix or no convergence: check nodes {}",
                trace.join(" -> "),
                self.failure_nodes.join(" and ")
            )
        }
    }
}

pub(super) enum NewtonFail {
    Singular(usize),
    Iterations,
}

pub(super) struct NewtonOut {
    pub(super) x: Vec<f64>,
    pub(super) iterations: usize,
    pub(super) result: Result<(), NewtonFail>,
}

/// Largest node-voltage move per Newton iteration when the circuit is
/// nonlinear; longer steps are scaled down as a whole.
const MAX_STEP: f64 = 1.0;

pub(crate) fn newton(
    ckt: &Circuit,
    x0: &[f64],
    ctx: &StampCtx,
    tol: &Tolerances,
    check_kcl: bool,
) -> NewtonOut {
    let nn = ckt.n_nodes();
    let mut x = x0.to_vec();
    let mut junctions: Vec<f64> = ckt
        .elems
        .iter()
        .map(|e| match *e {
            Elem::D { a, k, .. } => super::circuit::volt(&x, a) - super::circuit::volt(&x, k),
            _ => 0.0,
        })
        .collect();
    for it in 1..=tol.itl {
        let (m, mut rhs) = ckt.assemble(&x, ctx, &mut junctions);
        if let Err(Singular(col)) = solve(m, &mut rhs) {
            return NewtonOut {
                x,
                iterations: it,
                result: Err(NewtonFail::Singular(col)),
            };
        }
        let mut xn = rhs;
        if ckt.nonlinear {
            let worst = (0..nn).map(|i| (xn[i] - x[i]).abs()).fold(0.0, f64::max);
            if worst > MAX_STEP {
                let alpha = MAX_STEP / worst;
                for (v, old) in xn.iter_mut().zip(&x) {
                    *v = old + alpha * (*v - old);
                }
            }
        }
        if xn.iter().any(|v| !v.is_finite()) {
            return NewtonOut {
                x,
                iterations: it,
                result: Err(NewtonFail::Iterations),
            };
        }
        let small = xn.iter().zip(&x).enumerate().all(|(i, (a, b))| {
            let floor = if i < nn { tol.vntol } else { tol.abstol };
            (a - b).abs() <= tol.reltol * a.abs().max(b.abs()) + floor
        });
        x = xn;
        if small && (!ckt.nonlinear || it > 1) {
            if check_kcl {
                let (res, scale) = ckt.kcl(&x, ctx);
                let ok = res
                    .iter()
                    .zip(&scale)
                    .all(|(r, s)| r.abs() <= tol.abstol + tol.reltol * s);
                if !ok {
                    continue;
                }
            }
            return NewtonOut {
                x,
                iterations: it,
                result: Ok(()),
            };
        }
    }
    NewtonOut {
        x,
        iterations: tol.itl,
        result: Err(NewtonFail::Iterations),
    }
}

/// Run the ladder Direct -> GminStepping -> DynamicGmin -> SourceStepping,
/// stopping at the first strategy that converges.
pub(crate) fn solve_dc(
    ckt: &Circuit,
    netlist: &Netlist,
    x0: &[f64],
    time: Option<f64>,
    tol: &Tolerances,
) -> (Option<Vec<f64>>, SolveReport) {
    let mut report = SolveReport {
        converged: false,
        iterations: 0,
        strategy_trace: Vec::new(),
        max_residual: f64::NAN,
        failure_nodes: Vec::new(),
    };
    let ctx = |gmin: f64, scale: f64| StampCtx {
        gmin,
        scale,
        time,
        tran: None,
    };
    let mut last_x = x0.to_vec();
    let mut last_singular = None;
    let attempt = |report: &mut SolveReport, x: &[f64], gmin: f64, scale: f64, last_x: &mut Vec<f64>, last_singular: &mut Option<usize>| {
        let out = newton(ckt, x, &ctx(gmin, scale), tol, gmin == 0.0 && scale == 1.0);
        report.iterations += out.iterations;
        *last_x = out.x.clone();
        match out.result {
            Ok(()) => Some(out.x),
            Err(NewtonFail::Singular(c)) => {
                *last_singular = Some(c);
                None
            }
            Err(NewtonFail::Iterations) => None,
        }
    };

    // Direct.
    report.strategy_trace.push(Strategy::Direct);
    if let Some(x) = attempt(&mut report, x0, 0.0, 1.0, &mut last_x, &mut last_singular) {
        return finish(ckt, x, report, time);
    }

    // Gmin stepping: 1e-2 down to 1e-12 by decades, then without gmin.
    report.strategy_trace.push(Strategy::GminStepping);
    let mut x = x0.to_vec();
    let mut ok = true;
    for e in 2..=12 {
        match attempt(&mut report, &x, 10f64.powi(-e), 1.0, &mut last_x, &mut last_singular) {
            Some(nx) => x = nx,
            None => {
                ok = false;
                break;
            }
        }
    }
    if ok {
        if let Some(x) = attempt(&mut report, &x, 0.0, 1.0, &mut last_x, &mut last_singular) {
            return finish(ckt, x, report, time);
        }
    }

    // Dynamic gmin: adapt the reduction factor to how hard each step was.
    report.strategy_trace.push(Strategy::DynamicGmin);
    let mut x = x0.to_vec();
    let mut gmin = 1e-2;
    let mut factor = 10.0f64;
    let mut good: Option<(Vec<f64>, f64)> = None;
    let mut reached = false;
    for _ in 0..200 {
        match attempt(&mut report, &x, gmin, 1.0, &mut last_x, &mut last_singular) {
            Some(nx) => {
                good = Some((nx.clone(), gmin));
                x = nx;
                if gmin <= 1e-12 {
                    reached = true;
                    break;
                }
                factor = (factor * 2.0).min(1e3);
                gmin = (gmin / factor).max(1e-12);
            }
            None => {
                let Some((gx, gg)) = good.clone() else { break };
                factor = factor.sqrt();
                if factor < 1.000_05 {
                    break;
                }
                x = gx;
                gmin = gg / factor;
            }
        }
    }
    if reached {
        if let Some(x) = attempt(&mut report, &x, 0.0, 1.0, &mut last_x, &mut last_singular) {
            return finish(ckt, x, report, time);
        }
    }

    // Source stepping: ramp every independent source in ten steps.
    report.strategy_trace.push(Strategy::SourceStepping);
    let mut x = vec![0.0; ckt.dim()];
    let mut ok = true;
    for k in 1..=10 {
        match attempt(&mut report, &x, 0.0, k as f64 / 10.0, &mut last_x, &mut last_singular) {
            Some(nx) => x = nx,
            None => {
                ok = false;
                break;
            }
        }
    }
    if ok {
        return finish(ckt, x, report, time);
    }

    let (res, _) = ckt.kcl(&last_x, &ctx(0.0, 1.0));
    report.max_residual = res.iter().fold(0.0, |m, r| m.max(r.abs()));
    report.failure_nodes = failure_nodes(ckt, netlist, &res, last_singular);
    (None, report)
}

fn finish(
    ckt: &Circuit,
    x: Vec<f64>,
    mut report: SolveReport,
    time: Option<f64>,
) -> (Option<Vec<f64>>, SolveReport) {
    let (res, _) = ckt.kcl(
        &x,
        &StampCtx {
            gmin: 0.0,
            scale: 1.0,
            time,
            tran: None,
        },
    );
    report.converged = true;
    report.max_residual = res.iter().fold(0.0, |m, r| m.max(r.abs()));
    (Some(x), report)
}

/// Structurally floating nodes first; otherwise the two largest residuals,
/// or the node at the singular pivot.
fn failure_nodes(ckt: &Circuit, netlist: &Netlist, res: &[f64], singular: Option<usize>) -> Vec<String> {
    let floating: Vec<String> = floating_nodes(netlist).into_iter().map(|(n, _)| n).collect();
    if !floating.is_empty() {
        return floating.into_iter().take(2).collect();
    }
    let mut idx: Vec<usize> = (0..res.len()).filter(|&i| res[i].is_finite()).collect();
    idx.sort_by(|&a, &b| res[b].abs().total_cmp(&res[a].abs()).then(a.cmp(&b)));
    let mut out: Vec<String> = idx
        .into_iter()
        .filter(|&i| res[i] != 0.0)
        .take(2)
        .map(|i| ckt.node_names[i].clone())
        .collect();
    if out.is_empty() {
        if let Some(c) = singular {
            if c < ckt.n_nodes() {
                out.push(ckt.node_names[c].clone());
            }
        }
    }
    out
}

/// Converged DC solution.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSolution {
    pub node_voltages: BTreeMap<String, f64>,
    /// Element currents: first pin to second pin through the element,
    /// drain to source for MOSFETs.
    pub device_currents: BTreeMap<String, f64>,
    pub regions: BTreeMap<String, MosRegion>,
    pub report: SolveReport,
}

pub(crate) fn op_from_x(ckt: &Circuit, x: &[f64], report: SolveReport, time: Option<f64>) -> OpSolution {
    let node_voltages = ckt
        .node_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), x[i]))
        .collect();
    let ctx = StampCtx {
        gmin: 0.0,
        scale: 1.0,
        time,
        tran: None,
    };
    let currents = ckt.element_currents(x, &ctx);
    let device_currents = ckt.elem_ids.iter().cloned().zip(currents).collect();
    let regions = ckt
        .elems
        .iter()
        .zip(&ckt.elem_ids)
        .filter_map(|(e, id)| match *e {
            Elem::M { d, g, s, p } => {
                let v = |n| super::circuit::volt(x, n);
                Some((id.clone(), mos_eval(&p, v(d), v(g), v(s)).region))
            }
            _ => None,
        })
        .collect();
    OpSolution {
        node_voltages,
        device_currents,
        regions,
        report,
    }
}

pub fn operating_point(n: &Netlist) -> Result<OpSolution, SimError> {
    operating_point_with(n, &Tolerances::default())
}

pub fn operating_point_with(n: &Netlist, tol: &Tolerances) -> Result<OpSolution, SimError> {
    let ckt = Circuit::build(n)?;
    let x0 = initial_guess(&ckt, n);
    match solve_dc(&ckt, n, &x0, None, tol) {
        (Some(x), report) => Ok(op_from_x(&ckt, &x, report, None)),
        (None, report) => Err(SimError::NonConvergence(report)),
    }
}

/// Start from `.ic` values where given, zero elsewhere.
pub(crate) fn initial_guess(ckt: &Circuit, n: &Netlist) -> Vec<f64> {
    let mut x = vec![0.0; ckt.dim()];
    for (node, v) in &n.initial_conditions {
        if let Some(Some(i)) = ckt.lookup_node(node) {
            x[i] = *v;
        }
    }
    x
}

/// Per-point DC sweep result. Points that failed to converge are holes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub source: String,
    pub grid: Vec<f64>,
    pub node_names: Vec<String>,
    /// Node voltages per grid point; `None` at a hole.
    pub points: Vec<Option<Vec<f64>>>,
    pub reports: Vec<SolveReport>,
}

impl SweepResult {
    pub fn holes(&self) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| self.points[i].is_none())
            .collect()
    }

    /// Transfer curve of one node over the converged points.
    pub fn curve(&self, node: &str) -> Option<crate::model::Curve> {
        let k = self
            .node_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(node))?;
        let (grid, samples) = self
            .grid
            .iter()
            .zip(&self.points)
            .filter_map(|(g, p)| p.as_ref().map(|v| (*g, v[k])))
            .unzip();
        Some(crate::model::Curve::new(grid, samples))
    }
}

pub fn dc_sweep(n: &Netlist, source_id: &str, grid: &[f64]) -> Result<SweepResult, SimError> {
    let tol = Tolerances::default();
    let src = n
        .device(source_id)
        .filter(|d| d.kind == DeviceKind::V)
        .ok_or_else(|| SimError::UnknownSource(source_id.to_string()))?;
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SimError::BadArgument("sweep grid must be strictly increasing".into()));
    }
    let src_id = src.id.clone();
    let base = Circuit::build(n)?;
    let k = base
        .elem_index(&src_id)
        .ok_or_else(|| SimError::UnknownSource(source_id.to_string()))?;
    let mut ckt = base;
    let mut x = initial_guess(&ckt, n);
    let mut points = Vec::with_capacity(grid.len());
    let mut reports = Vec::with_capacity(grid.len());
    for &v in grid {
        if let Elem::V { ref mut src, .. } = ckt.elems[k] {
            src.dc = v;
            src.sin = None;
            src.pulse = None;
        }
        let (sol, report) = solve_dc(&ckt, n, &x, None, &tol);
        match sol {
            Some(nx) => {
                points.push(Some(nx[..ckt.n_nodes()].to_vec()));
                x = nx;
            }
            None => points.push(None),
        }
        reports.push(report);
    }
    if points.iter().all(Option::is_none) {
        return Err(SimError::AllPointsFailed(reports.pop().unwrap_or_else(|| SolveReport {
            converged: false,
            iterations: 0,
            strategy_trace: Vec::new(),
            max_residual: f64::NAN,
            failure_nodes: Vec::new(),
        })));
    }
    Ok(SweepResult {
        source: src_id,
        grid: grid.to_vec(),
        node_names: ckt.node_names.clone(),
        points,
        reports,
    })
}

/// Inclusive grid `start, start+step, ..., stop` without accumulated drift.
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || stop < start {
        return vec![start];
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}
