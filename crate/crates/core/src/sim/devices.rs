//! Level-1 MOSFET and junction diode equations with analytic derivatives.

use serde::{Deserialize, Serialize};

/// Thermal voltage at 300 K.
pub const VT: f64 = 0.025_852;
/// Conductance every nonlinear device carries in parallel with its channel
/// or junction, so a device that is fully off still has a finite Jacobian.
pub const DEVICE_GMIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MosRegion {
    Cutoff,
    Triode,
    Saturation,
}

impl MosRegion {
    pub fn as_str(self) -> &'static str {
        match self {
            MosRegion::Cutoff => "cutoff",
            MosRegion::Triode => "triode",
            MosRegion::Saturation => "saturation",
        }
    }
}

/// Square-law parameters after W/L scaling. `polarity` is +1 for NMOS and
/// -1 for PMOS; `vth` is a magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosParams {
    pub polarity: f64,
    pub vth: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// Drain current (into the drain terminal, out of the source) and its
/// partial derivatives with respect to the three terminal voltages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosEval {
    pub id: f64,
    pub d_vd: f64,
    pub d_vg: f64,
    pub d_vs: f64,
    pub region: MosRegion,
}

/// Forward-mode square law: (id, gm, gds, region) for vds >= 0.
fn square_law(p: &MosParams, vgs: f64, vds: f64) -> (f64, f64, f64, MosRegion) {
    let vov = vgs - p.vth;
    if vov <= 0.0 {
        return (0.0, 0.0, 0.0, MosRegion::Cutoff);
    }
    let clm = 1.0 + p.lambda * vds;
    if vds < vov {
        let core = vov * vds - 0.5 * vds * vds;
        let id = p.beta * core * clm;
        let gm = p.beta * vds * clm;
        let gds = p.beta * (vov - vds) * clm + p.beta * core * p.lambda;
        (id, gm, gds, MosRegion::Triode)
    } else {
        let core = 0.5 * vov * vov;
        let id = p.beta * core * clm;
        let gm = p.beta * vov * clm;
        let gds = p.beta * core * p.lambda;
        (id, gm, gds, MosRegion::Saturation)
    }
}

/// Symmetric level-1 evaluation: drain and source swap roles when the
/// channel voltage reverses. No body effect.
pub fn mos_eval(p: &MosParams, vd: f64, vg: f64, vs: f64) -> MosEval {
    let s = p.polarity;
    let (ud, ug, us) = (s * vd, s * vg, s * vs);
    let (n, dd, dg, ds, region) = if ud >= us {
        let (id, gm, gds, r) = square_law(p, ug - us, ud - us);
        (id, gds, gm, -gm - gds, r)
    } else {
        let (id, gm, gds, r) = square_law(p, ug - ud, us - ud);
        (-id, gm + gds, -gm, -gds, r)
    };
    // I = s * N(s v); dI/dv = s * dN/du * s.
    MosEval {
        id: s * n + DEVICE_GMIN * (vd - vs),
        d_vd: dd + DEVICE_GMIN,
        d_vg: dg,
        d_vs: ds - DEVICE_GMIN,
        region,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiodeEval {
    pub id: f64,
    pub gd: f64,
}

pub fn diode_eval(is_sat: f64, n: f64, v: f64) -> DiodeEval {
    let nvt = n * VT;
    let e = (v / nvt).min(700.0).exp();
    DiodeEval {
        id: is_sat * (e - 1.0) + DEVICE_GMIN * v,
        gd: is_sat * e / nvt + DEVICE_GMIN,
    }
}

/// Junction voltage limiting for Newton steps on an exponential.
pub fn pnjlim(vnew: f64, vold: f64, is_sat: f64, n: f64) -> f64 {
    let nvt = n * VT;
    let vcrit = nvt * (nvt / (std::f64::consts::SQRT_2 * is_sat)).ln();
    if vnew > vcrit && (vnew - vold).abs() > 2.0 * nvt {
        if vold > 0.0 {
            let arg = 1.0 + (vnew - vold) / nvt;
            if arg > 0.0 {
                vold + nvt * arg.ln()
            } else {
                vcrit
            }
        } else {
            nvt * (vnew / nvt).ln()
        }
    } else {
        vnew
    }
}
