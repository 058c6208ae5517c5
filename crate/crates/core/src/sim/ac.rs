//! Small-signal AC analysis around the operating point.

use num_complex::Complex64;

use super::circuit::{volt, Circuit, Elem, Node};
use super::dc::{initial_guess, solve_dc};
use super::devices::{diode_eval, mos_eval};
use super::linalg::{solve, Matrix};
use super::{SimError, Tolerances};
use crate::model::FreqResponse;
use crate::netlist::{AcSweepKind, DeviceKind, Netlist};

#[derive(Debug, Clone, PartialEq)]
pub struct AcResult {
    pub freqs: Vec<f64>,
    pub node_names: Vec<String>,
    /// Complex node voltages per frequency.
    pub values: Vec<Vec<Complex64>>,
}

impl AcResult {
    pub fn response(&self, node: &str) -> Option<FreqResponse> {
        let k = self
            .node_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(node))?;
        let mut r = FreqResponse::default();
        for (f, v) in self.freqs.iter().zip(&self.values) {
            r.freqs.push(*f);
            r.mag_db.push(20.0 * v[k].norm().max(1e-20).log10());
            r.phase_deg.push(v[k].arg().to_degrees());
        }
        Some(r)
    }
}

/// Frequency points for a `.ac` directive.
pub fn ac_grid(sweep: AcSweepKind, points: u32, fstart: f64, fstop: f64) -> Vec<f64> {
    let points = points.max(1);
    let stop = fstop * (1.0 + 1e-9);
    match sweep {
        AcSweepKind::Lin => {
            if points == 1 || fstop == fstart {
                return vec![fstart];
            }
            let step = (fstop - fstart) / (points - 1) as f64;
            (0..points).map(|i| fstart + step * i as f64).collect()
        }
        AcSweepKind::Dec | AcSweepKind::Oct => {
            let base: f64 = if sweep == AcSweepKind::Dec { 10.0 } else { 2.0 };
            let mut out = Vec::new();
            let mut i = 0;
            loop {
                let f = fstart * base.powf(i as f64 / points as f64);
                if f > stop || out.len() > 1_000_000 {
                    break;
                }
                out.push(f);
                i += 1;
            }
            out
        }
    }
}

fn stamp_y(m: &mut Matrix<Complex64>, a: Node, b: Node, y: Complex64) {
    if let Some(i) = a {
        m.add(i, i, y);
    }
    if let Some(j) = b {
        m.add(j, j, y);
    }
    if let (Some(i), Some(j)) = (a, b) {
        m.add(i, j, -y);
        m.add(j, i, -y);
    }
}

fn stamp_branch(m: &mut Matrix<Complex64>, row: usize, a: Node, b: Node) {
    let one = Complex64::new(1.0, 0.0);
    if let Some(a) = a {
        m.add(a, row, one);
        m.add(row, a, one);
    }
    if let Some(b) = b {
        m.add(b, row, -one);
        m.add(row, b, -one);
    }
}

fn solve_ac(ckt: &Circuit, x_op: &[f64], freqs: &[f64]) -> Result<Vec<Vec<Complex64>>, SimError> {
    let nn = ckt.n_nodes();
    let mut out = Vec::with_capacity(freqs.len());
    for &f in freqs {
        let w = 2.0 * std::f64::consts::PI * f;
        let mut m = Matrix::<Complex64>::zeros(ckt.dim());
        let mut rhs = vec![Complex64::new(0.0, 0.0); ckt.dim()];
        for e in &ckt.elems {
            match *e {
                Elem::R { a, b, g } => stamp_y(&mut m, a, b, Complex64::new(g, 0.0)),
                Elem::C { a, b, c, .. } => stamp_y(&mut m, a, b, Complex64::new(0.0, w * c)),
                Elem::L { a, b, l, br } => {
                    stamp_branch(&mut m, nn + br, a, b);
                    m.add(nn + br, nn + br, Complex64::new(0.0, -w * l));
                }
                Elem::V { a, b, br, ref src } => {
                    stamp_branch(&mut m, nn + br, a, b);
                    rhs[nn + br] = Complex64::from_polar(src.ac_mag, src.ac_phase.to_radians());
                }
                Elem::I { a, b, ref src } => {
                    let i = Complex64::from_polar(src.ac_mag, src.ac_phase.to_radians());
                    if let Some(a) = a {
                        rhs[a] -= i;
                    }
                    if let Some(b) = b {
                        rhs[b] += i;
                    }
                }
                Elem::M { d, g, s, p } => {
                    let ev = mos_eval(&p, volt(x_op, d), volt(x_op, g), volt(x_op, s));
                    for (node, deriv) in [(d, ev.d_vd), (g, ev.d_vg), (s, ev.d_vs)] {
                        if let Some(col) = node {
                            if let Some(r) = d {
                                m.add(r, col, Complex64::new(deriv, 0.0));
                            }
                            if let Some(r) = s {
                                m.add(r, col, Complex64::new(-deriv, 0.0));
                            }
                        }
                    }
                }
                Elem::D { a, k, is_sat, n } => {
                    let gd = diode_eval(is_sat, n, volt(x_op, a) - volt(x_op, k)).gd;
                    stamp_y(&mut m, a, k, Complex64::new(gd, 0.0));
                }
            }
        }
        solve(m, &mut rhs).map_err(|s| {
            let node = ckt.node_names.get(s.0).cloned().unwrap_or_else(|| format!("branch {}", s.0));
            SimError::Build(format!("singular AC matrix at {f} Hz near {node}"))
        })?;
        out.push(rhs[..nn].to_vec());
    }
    Ok(out)
}

/// AC analysis driven by every source that carries an `AC` magnitude.
pub fn ac_analysis(n: &Netlist, freqs: &[f64]) -> Result<AcResult, SimError> {
    let ckt = Circuit::build(n)?;
    ac_with(&ckt, n, freqs)
}

fn ac_with(ckt: &Circuit, n: &Netlist, freqs: &[f64]) -> Result<AcResult, SimError> {
    if freqs.iter().any(|f| !(*f > 0.0)) {
        return Err(SimError::BadArgument("AC frequencies must be positive".into()));
    }
    let x0 = initial_guess(ckt, n);
    let x = match solve_dc(ckt, n, &x0, None, &Tolerances::default()) {
        (Some(x), _) => x,
        (None, report) => return Err(SimError::NonConvergence(report)),
    };
    Ok(AcResult {
        freqs: freqs.to_vec(),
        node_names: ckt.node_names.clone(),
        values: solve_ac(ckt, &x, freqs)?,
    })
}

/// Transfer from `input_source` (unit AC excitation, all other AC sources
/// off) to `output_node`.
pub fn ac_response(
    n: &Netlist,
    input_source: &str,
    output_node: &str,
    freqs: &[f64],
) -> Result<FreqResponse, SimError> {
    let dev = n
        .device(input_source)
        .filter(|d| matches!(d.kind, DeviceKind::V | DeviceKind::I))
        .ok_or_else(|| SimError::UnknownSource(input_source.to_string()))?;
    let mut ckt = Circuit::build(n)?;
    let target = ckt
        .elem_index(&dev.id)
        .ok_or_else(|| SimError::UnknownSource(input_source.to_string()))?;
    for (k, e) in ckt.elems.iter_mut().enumerate() {
        if let Elem::V { ref mut src, .. } | Elem::I { ref mut src, .. } = e {
            src.ac_mag = if k == target { 1.0 } else { 0.0 };
            src.ac_phase = 0.0;
        }
    }
    let res = ac_with(&ckt, n, freqs)?;
    res.response(output_node)
        .ok_or_else(|| SimError::UnknownNode(output_node.to_string()))
}
