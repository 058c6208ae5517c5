//! Flattened, indexed circuit and the MNA stamps shared by every analysis.

use std::collections::BTreeMap;

use super::devices::{diode_eval, mos_eval, pnjlim, MosParams};
use super::linalg::Matrix;
use super::SimError;
use crate::netlist::{is_ground, DeviceKind, ModelKind, Netlist};

/// Node index, `None` for ground.
pub(crate) type Node = Option<usize>;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Source {
    pub dc: f64,
    pub ac_mag: f64,
    pub ac_phase: f64,
    pub sin: Option<[f64; 4]>,
    pub pulse: Option<[f64; 7]>,
}

impl Source {
    /// Value at time `t`; `None` means the DC operating point.
    pub fn value(&self, t: Option<f64>) -> f64 {
        let Some(t) = t else { return self.dc };
        if let Some([vo, va, f, td]) = self.sin {
            return if t < td {
                vo
            } else {
                vo + va * (2.0 * std::f64::consts::PI * f * (t - td)).sin()
            };
        }
        if let Some([v1, v2, td, tr, tf, pw, per]) = self.pulse {
            if t < td {
                return v1;
            }
            let mut tt = t - td;
            if per > 0.0 {
                tt %= per;
            }
            return if tt < tr {
                if tr > 0.0 {
                    v1 + (v2 - v1) * tt / tr
                } else {
                    v2
                }
            } else if tt < tr + pw {
                v2
            } else if tt < tr + pw + tf {
                if tf > 0.0 {
                    v2 + (v1 - v2) * (tt - tr - pw) / tf
                } else {
                    v1
                }
            } else {
                v1
            };
        }
        self.dc
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Elem {
    R { a: Node, b: Node, g: f64 },
    C { a: Node, b: Node, c: f64, ic: Option<f64> },
    L { a: Node, b: Node, l: f64, br: usize },
    V { a: Node, b: Node, br: usize, src: Source },
    I { a: Node, b: Node, src: Source },
    M { d: Node, g: Node, s: Node, p: MosParams },
    D { a: Node, k: Node, is_sat: f64, n: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct Circuit {
    pub node_names: Vec<String>,
    pub node_index: BTreeMap<String, usize>,
    pub elems: Vec<Elem>,
    pub elem_ids: Vec<String>,
    pub n_branches: usize,
    pub nonlinear: bool,
}

/// How to stamp one Newton iteration.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StampCtx<'a> {
    /// Conductance from every node to ground (homotopy aid).
    pub gmin: f64,
    /// Multiplier on every independent source (source stepping).
    pub scale: f64,
    /// Evaluation time; `None` at DC.
    pub time: Option<f64>,
    pub tran: Option<TranState<'a>>,
}

/// Backward-Euler history: capacitor voltages and inductor currents at the
/// previous time point, indexed by element.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TranState<'a> {
    pub dt: f64,
    pub prev: &'a [f64],
}

#[inline]
pub(crate) fn volt(x: &[f64], n: Node) -> f64 {
    n.map_or(0.0, |i| x[i])
}

fn stamp_g(m: &mut Matrix<f64>, a: Node, b: Node, g: f64) {
    if let Some(i) = a {
        m.add(i, i, g);
    }
    if let Some(j) = b {
        m.add(j, j, g);
    }
    if let (Some(i), Some(j)) = (a, b) {
        m.add(i, j, -g);
        m.add(j, i, -g);
    }
}

/// Current `i` flowing out of `a`, through the element, into `b`.
fn stamp_i(rhs: &mut [f64], a: Node, b: Node, i: f64) {
    if let Some(a) = a {
        rhs[a] -= i;
    }
    if let Some(b) = b {
        rhs[b] += i;
    }
}

impl Circuit {
    pub fn build(n: &Netlist) -> Result<Circuit, SimError> {
        let (flat, unresolved) = n.flatten();
        if let Some(name) = unresolved.first() {
            return Err(SimError::Build(format!("subcircuit {name} is not defined")));
        }
        let mut ckt = Circuit {
            node_names: Vec::new(),
            node_index: BTreeMap::new(),
            elems: Vec::new(),
            elem_ids: Vec::new(),
            n_branches: 0,
            nonlinear: false,
        };
        let mut branches = 0;
        for d in &flat.devices {
            let pins: Vec<Node> = d.pins.iter().map(|p| ckt.node(p)).collect();
            let source = || Source {
                dc: d.param("dc").unwrap_or(0.0),
                ac_mag: d.param("ac_mag").unwrap_or(0.0),
                ac_phase: d.param("ac_phase").unwrap_or(0.0),
                sin: d.param("sin_vo").map(|_| {
                    let g = |k: &str| d.param(k).unwrap_or(0.0);
                    [g("sin_vo"), g("sin_va"), g("sin_freq"), g("sin_td")]
                }),
                pulse: d.param("pulse_v1").map(|_| {
                    let g = |k: &str| d.param(k).unwrap_or(0.0);
                    [
                        g("pulse_v1"),
                        g("pulse_v2"),
                        g("pulse_td"),
                        g("pulse_tr"),
                        g("pulse_tf"),
                        g("pulse_pw"),
                        g("pulse_per"),
                    ]
                }),
            };
            let e = match d.kind {
                DeviceKind::R => {
                    let r = d.value();
                    if r == 0.0 || !r.is_finite() {
                        return Err(SimError::Build(format!("{} has zero resistance", d.id)));
                    }
                    Elem::R {
                        a: pins[0],
                        b: pins[1],
                        g: 1.0 / r,
                    }
                }
                DeviceKind::C => Elem::C {
                    a: pins[0],
                    b: pins[1],
                    c: d.value(),
                    ic: d.param("ic"),
                },
                DeviceKind::L => {
                    branches += 1;
                    Elem::L {
                        a: pins[0],
                        b: pins[1],
                        l: d.value(),
                        br: branches - 1,
                    }
                }
                DeviceKind::V => {
                    branches += 1;
                    Elem::V {
                        a: pins[0],
                        b: pins[1],
                        br: branches - 1,
                        src: source(),
                    }
                }
                DeviceKind::I => Elem::I {
                    a: pins[0],
                    b: pins[1],
                    src: source(),
                },
                DeviceKind::Mosfet => {
                    let name = d.model.as_deref().unwrap_or("nmos");
                    let card = n
                        .model(name)
                        .ok_or_else(|| SimError::Build(format!("unknown model {name}")))?;
                    let polarity = match card.kind {
                        ModelKind::Nmos1 => 1.0,
                        ModelKind::Pmos1 => -1.0,
                        ModelKind::Diode => {
                            return Err(SimError::Build(format!("{} uses a diode model", d.id)))
                        }
                    };
                    ckt.nonlinear = true;
                    Elem::M {
                        d: pins[0],
                        g: pins[1],
                        s: pins[2],
                        p: MosParams {
                            polarity,
                            vth: card.vth,
                            beta: card.kp * d.param("w").unwrap_or(1.0) / d.param("l").unwrap_or(1.0),
                            lambda: card.lambda,
                        },
                    }
                }
                DeviceKind::Diode => {
                    let name = d.model.as_deref().unwrap_or("d");
                    let card = n
                        .model(name)
                        .filter(|c| c.kind == ModelKind::Diode)
                        .ok_or_else(|| SimError::Build(format!("unknown diode model {name}")))?;
                    ckt.nonlinear = true;
                    Elem::D {
                        a: pins[0],
                        k: pins[1],
                        is_sat: card.is_sat,
                        n: card.n,
                    }
                }
                DeviceKind::SubcktInstance => unreachable!("flattened"),
            };
            ckt.elems.push(e);
            ckt.elem_ids.push(d.id.clone());
        }
        ckt.n_branches = branches;
        Ok(ckt)
    }

    fn node(&mut self, name: &str) -> Node {
        if is_ground(name) {
            return None;
        }
        let key = name.to_ascii_lowercase();
        if let Some(&i) = self.node_index.get(&key) {
            return Some(i);
        }
        self.node_names.push(name.to_string());
        self.node_index.insert(key, self.node_names.len() - 1);
        Some(self.node_names.len() - 1)
    }

    pub fn lookup_node(&self, name: &str) -> Option<Node> {
        if is_ground(name) {
            return Some(None);
        }
        self.node_index.get(&name.to_ascii_lowercase()).map(|&i| Some(i))
    }

    pub fn n_nodes(&self) -> usize {
        self.node_names.len()
    }

    pub fn dim(&self) -> usize {
        self.node_names.len() + self.n_branches
    }

    pub fn elem_index(&self, id: &str) -> Option<usize> {
        self.elem_ids.iter().position(|e| e.eq_ignore_ascii_case(id))
    }

    /// Linearize at `x`. `junctions` holds the limited diode voltages of the
    /// previous iterate and is updated in place.
    pub fn assemble(
        &self,
        x: &[f64],
        ctx: &StampCtx,
        junctions: &mut [f64],
    ) -> (Matrix<f64>, Vec<f64>) {
        let nn = self.n_nodes();
        let mut m = Matrix::zeros(self.dim());
        let mut rhs = vec![0.0; self.dim()];
        if ctx.gmin > 0.0 {
            for i in 0..nn {
                m.add(i, i, ctx.gmin);
            }
        }
        for (k, e) in self.elems.iter().enumerate() {
            match *e {
                Elem::R { a, b, g } => stamp_g(&mut m, a, b, g),
                Elem::C { a, b, c, .. } => {
                    if let Some(tr) = ctx.tran {
                        let g = c / tr.dt;
                        stamp_g(&mut m, a, b, g);
                        stamp_i(&mut rhs, a, b, -g * tr.prev[k]);
                    }
                }
                Elem::L { a, b, l, br } => {
                    let row = nn + br;
                    if let Some(a) = a {
                        m.add(a, row, 1.0);
                        m.add(row, a, 1.0);
                    }
                    if let Some(b) = b {
                        m.add(b, row, -1.0);
                        m.add(row, b, -1.0);
                    }
                    if let Some(tr) = ctx.tran {
                        let z = l / tr.dt;
                        m.add(row, row, -z);
                        rhs[row] = -z * tr.prev[k];
                    }
                }
                Elem::V { a, b, br, ref src } => {
                    let row = nn + br;
                    if let Some(a) = a {
                        m.add(a, row, 1.0);
                        m.add(row, a, 1.0);
                    }
                    if let Some(b) = b {
                        m.add(b, row, -1.0);
                        m.add(row, b, -1.0);
                    }
                    rhs[row] = ctx.scale * src.value(ctx.time);
                }
                Elem::I { a, b, ref src } => {
                    stamp_i(&mut rhs, a, b, ctx.scale * src.value(ctx.time));
                }
                Elem::M { d, g, s, p } => {
                    let (vd, vg, vs) = (volt(x, d), volt(x, g), volt(x, s));
                    let ev = mos_eval(&p, vd, vg, vs);
                    let terms = [(d, ev.d_vd, vd), (g, ev.d_vg, vg), (s, ev.d_vs, vs)];
                    let mut ieq = ev.id;
                    for (node, deriv, v) in terms {
                        ieq -= deriv * v;
                        if let Some(col) = node {
                            if let Some(r) = d {
                                m.add(r, col, deriv);
                            }
                            if let Some(r) = s {
                                m.add(r, col, -deriv);
                            }
                        }
                    }
                    stamp_i(&mut rhs, d, s, ieq);
                }
                Elem::D { a, k: cath, is_sat, n } => {
                    let raw = volt(x, a) - volt(x, cath);
                    let v = pnjlim(raw, junctions[k], is_sat, n);
                    junctions[k] = v;
                    let ev = diode_eval(is_sat, n, v);
                    stamp_g(&mut m, a, cath, ev.gd);
                    stamp_i(&mut rhs, a, cath, ev.id - ev.gd * v);
                }
            }
        }
        (m, rhs)
    }

    /// Current through each element at `x` (flowing from its first pin to
    /// its second through the element; drain-to-source for MOSFETs).
    pub fn element_currents(&self, x: &[f64], ctx: &StampCtx) -> Vec<f64> {
        let nn = self.n_nodes();
        self.elems
            .iter()
            .enumerate()
            .map(|(k, e)| match *e {
                Elem::R { a, b, g } => g * (volt(x, a) - volt(x, b)),
                Elem::C { a, b, c, .. } => match ctx.tran {
                    Some(tr) => c * (volt(x, a) - volt(x, b) - tr.prev[k]) / tr.dt,
                    None => 0.0,
                },
                Elem::L { br, .. } | Elem::V { br, .. } => x[nn + br],
                Elem::I { ref src, .. } => ctx.scale * src.value(ctx.time),
                Elem::M { d, g, s, p } => mos_eval(&p, volt(x, d), volt(x, g), volt(x, s)).id,
                Elem::D { a, k: cath, is_sat, n } => diode_eval(is_sat, n, volt(x, a) - volt(x, cath)).id,
            })
            .collect()
    }

    /// KCL imbalance per node with the true device equations, and the
    /// largest element current incident on each node.
    pub fn kcl(&self, x: &[f64], ctx: &StampCtx) -> (Vec<f64>, Vec<f64>) {
        let nn = self.n_nodes();
        let mut res = vec![0.0; nn];
        let mut scale = vec![0.0f64; nn];
        let currents = self.element_currents(x, ctx);
        let mut flow = |a: Node, b: Node, i: f64| {
            if let Some(a) = a {
                res[a] += i;
                scale[a] = scale[a].max(i.abs());
            }
            if let Some(b) = b {
                res[b] -= i;
                scale[b] = scale[b].max(i.abs());
            }
        };
        for (e, &i) in self.elems.iter().zip(&currents) {
            match *e {
                Elem::R { a, b, .. }
                | Elem::C { a, b, .. }
                | Elem::L { a, b, .. }
                | Elem::V { a, b, .. }
                | Elem::I { a, b, .. } => flow(a, b, i),
                Elem::M { d, s, .. } => flow(d, s, i),
                Elem::D { a, k, .. } => flow(a, k, i),
            }
        }
        if ctx.gmin > 0.0 {
            for (i, r) in res.iter_mut().enumerate() {
                *r += ctx.gmin * x[i];
            }
        }
        (res, scale)
    }
}
