//! Fixed-step backward-Euler transient analysis.

use std::collections::BTreeMap;

use super::circuit::{volt, Circuit, Elem, StampCtx, TranState};
use super::dc::{newton, solve_dc, SolveReport};
use super::{SimError, Tolerances};
use crate::model::Curve;
use crate::netlist::Netlist;

#[derive(Debug, Clone, PartialEq)]
pub struct TranResult {
    pub times: Vec<f64>,
    pub node_names: Vec<String>,
    /// Node voltages per time point.
    pub samples: Vec<Vec<f64>>,
    /// Whether the run started from initial conditions instead of an
    /// operating point.
    pub uic: bool,
}

impl TranResult {
    pub fn curve(&self, node: &str) -> Option<Curve> {
        let k = self
            .node_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(node))?;
        Some(Curve::new(
            self.times.clone(),
            self.samples.iter().map(|s| s[k]).collect(),
        ))
    }
}

/// Integrate from 0 to `t_stop` with step `dt`.
///
/// Initial conditions come from `.ic` lines, the `initial_conditions`
/// argument (which wins on conflicts) and capacitor `ic=` values. When any
/// of those exist, or `uic` is set, the run starts directly from them with
/// unspecified nodes at 0 V; otherwise it starts from the operating point
/// with sources evaluated at t = 0.
pub fn transient(
    n: &Netlist,
    t_stop: f64,
    dt: f64,
    initial_conditions: &BTreeMap<String, f64>,
    uic: bool,
) -> Result<TranResult, SimError> {
    if !(dt > 0.0) || !(t_stop >= dt) || !(t_stop / dt <= 1e7) {
        return Err(SimError::BadArgument(format!(
            "transient needs dt > 0 and t_stop >= dt (dt={dt}, t_stop={t_stop})"
        )));
    }
    let tol = Tolerances::default();
    let ckt = Circuit::build(n)?;
    let nn = ckt.n_nodes();
    let mut ics = n.initial_conditions.clone();
    ics.extend(initial_conditions.iter().map(|(k, v)| (k.clone(), *v)));
    let any_cap_ic = ckt
        .elems
        .iter()
        .any(|e| matches!(e, Elem::C { ic: Some(_), .. }));
    let use_uic = uic || !ics.is_empty() || any_cap_ic;

    let mut x = vec![0.0; ckt.dim()];
    if use_uic {
        for (node, v) in &ics {
            match ckt.lookup_node(node) {
                Some(Some(i)) => x[i] = *v,
                Some(None) => {}
                None => return Err(SimError::UnknownNode(node.clone())),
            }
        }
    } else {
        match solve_dc(&ckt, n, &x, Some(0.0), &tol) {
            (Some(sol), _) => x = sol,
            (None, report) => {
                return Err(SimError::TranNonConvergence { time: 0.0, report });
            }
        }
    }
    let mut prev: Vec<f64> = ckt
        .elems
        .iter()
        .map(|e| match *e {
            Elem::C { a, b, ic, .. } => match (use_uic, ic) {
                (true, Some(v)) => v,
                _ => volt(&x, a) - volt(&x, b),
            },
            Elem::L { br, .. } => x[nn + br],
            _ => 0.0,
        })
        .collect();

    let steps = (t_stop / dt).round().max(1.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut samples = Vec::with_capacity(steps + 1);
    times.push(0.0);
    samples.push(x[..nn].to_vec());
    for i in 1..=steps {
        let t = dt * i as f64;
        let ctx = StampCtx {
            gmin: 0.0,
            scale: 1.0,
            time: Some(t),
            tran: Some(TranState { dt, prev: &prev }),
        };
        let out = newton(&ckt, &x, &ctx, &tol, true);
        if out.result.is_err() {
            let (res, _) = ckt.kcl(&out.x, &ctx);
            let mut idx: Vec<usize> = (0..nn).collect();
            idx.sort_by(|&p, &q| res[q].abs().total_cmp(&res[p].abs()));
            return Err(SimError::TranNonConvergence {
                time: t,
                report: SolveReport {
                    converged: false,
                    iterations: out.iterations,
                    strategy_trace: vec![super::dc::Strategy::Direct],
                    max_residual: res.iter().fold(0.0, |m, r| m.max(r.abs())),
                    failure_nodes: idx.into_iter().take(2).map(|k| ckt.node_names[k].clone()).collect(),
                },
            });
        }
        x = out.x;
        for (k, e) in ckt.elems.iter().enumerate() {
            match *e {
                Elem::C { a, b, .. } => prev[k] = volt(&x, a) - volt(&x, b),
                Elem::L { br, .. } => prev[k] = x[nn + br],
                _ => {}
            }
        }
        times.push(t);
        samples.push(x[..nn].to_vec());
    }
    Ok(TranResult {
        times,
        node_names: ckt.node_names.clone(),
        samples,
        uic: use_uic,
    })
}
