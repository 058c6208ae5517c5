//! Modified nodal analysis: operating point, DC sweep, backward-Euler
//! transient and small-signal AC over a flattened [`Netlist`].
//!
//! Nonlinear solves run Newton-Raphson and, when that fails, walk the ladder
//! Direct, GminStepping, DynamicGmin, SourceStepping. The report of a failed
//! solve lists every strategy tried and the nodes to blame.
//!
//! [`Netlist`]: crate::netlist::Netlist

mod ac;
mod circuit;
mod dc;
mod devices;
mod linalg;
mod tran;

use std::fmt::Write as _;

use thiserror::Error;

pub use ac::{ac_analysis, ac_grid, ac_response, AcResult};
pub use dc::{
    dc_sweep, linear_grid, operating_point, operating_point_with, OpSolution, SolveReport,
    Strategy, SweepResult,
};
pub use devices::{diode_eval, mos_eval, DiodeEval, MosEval, MosParams, MosRegion, DEVICE_GMIN, VT};
pub use tran::{transient, TranResult};

/// Newton tolerances. The defaults are the conventional SPICE ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub abstol: f64,
    pub vntol: f64,
    pub reltol: f64,
    pub itl: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            abstol: 1e-12,
            vntol: 1e-6,
            reltol: 1e-3,
            itl: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("cannot build circuit: {0}")]
    Build(String),
    #[error("operating point did not converge: {}", .0.summary())]
    NonConvergence(SolveReport),
    #[error("unknown source {0}")]
    UnknownSource(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("every sweep point failed: {}", .0.summary())]
    AllPointsFailed(SolveReport),
    #[error("transient failed at t={time:e} s: {}", .report.summary())]
    TranNonConvergence { time: f64, report: SolveReport },
    #[error("{0}")]
    BadArgument(String),
}

impl SimError {
    pub fn report(&self) -> Option<&SolveReport> {
        match self {
            SimError::NonConvergence(r)
            | SimError::AllPointsFailed(r)
            | SimError::TranNonConvergence { report: r, .. } => Some(r),
            _ => None,
        }
    }
}

/// Tab-separated table: one grid column, then one column per signal.
pub fn to_tsv(grid_name: &str, grid: &[f64], columns: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from(grid_name);
    for (name, _) in columns {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for (i, g) in grid.iter().enumerate() {
        let _ = write!(out, "{g:e}");
        for (_, col) in columns {
            let _ = write!(out, "\t{:e}", col.get(i).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}
