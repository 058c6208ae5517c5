//! SPICE-subset netlists: parsing, canonical emission, structural checks and
//! single-parameter patches.
//!
//! Grammar summary (case-insensitive keywords, one statement per line, `+`
//! continues the previous line, `*` starts a comment line, `;` an inline one):
//!
//! ```text
//! Rxx n1 n2 value
//! Cxx n1 n2 value [ic=v]
//! Lxx n1 n2 value
//! Vxx n+ n- [DC] [v] [AC mag [phase]] [SIN(vo va freq [td])] [PULSE(v1 v2 td tr tf pw per)]
//! Ixx n+ n- ...same source spec...
//! Mxx drain gate source body model [W=v] [L=v]
//! Dxx anode cathode [model]
//! Xxx pin... subckt
//! .subckt name pin... / .ends [name]
//! .model name nmos|pmos|d (vto= kp= lambda= is= n=)
//! .op | .dc src start stop step | .ac dec|lin|oct pts fstart fstop | .tran tstep tstop [uic]
//! .ic V(node)=v ...
//! .bias src lo hi [points]
//! .end
//! ```
//!
//! Values accept the suffixes t g meg k m u µ n p f mil; trailing unit letters
//! are ignored (`10uF`, `1kohm`).

pub(crate) mod check;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use check::{check_structure, Severity, StructuralViolation, RULE_CATALOG};
pub use parse::parse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceKind {
    R,
    C,
    L,
    V,
    I,
    Mosfet,
    Diode,
    SubcktInstance,
}

impl DeviceKind {
    pub fn from_letter(c: char) -> Option<DeviceKind> {
        Some(match c.to_ascii_uppercase() {
            'R' => DeviceKind::R,
            'C' => DeviceKind::C,
            'L' => DeviceKind::L,
            'V' => DeviceKind::V,
            'I' => DeviceKind::I,
            'M' => DeviceKind::Mosfet,
            'D' => DeviceKind::Diode,
            'X' => DeviceKind::SubcktInstance,
            _ => return None,
        })
    }

    /// Parameters `apply_patch` may touch.
    pub fn legal_params(self) -> &'static [&'static str] {
        match self {
            DeviceKind::R | DeviceKind::L => &["value"],
            DeviceKind::C => &["value", "ic"],
            DeviceKind::V | DeviceKind::I => &[
                "dc", "ac_mag", "ac_phase", "sin_vo", "sin_va", "sin_freq", "sin_td", "pulse_v1",
                "pulse_v2", "pulse_td", "pulse_tr", "pulse_tf", "pulse_pw", "pulse_per",
            ],
            DeviceKind::Mosfet => &["w", "l"],
            DeviceKind::Diode | DeviceKind::SubcktInstance => &[],
        }
    }
}

pub(crate) const SIN_KEYS: [&str; 4] = ["sin_vo", "sin_va", "sin_freq", "sin_td"];
pub(crate) const PULSE_KEYS: [&str; 7] = [
    "pulse_v1", "pulse_v2", "pulse_td", "pulse_tr", "pulse_tf", "pulse_pw", "pulse_per",
];

/// One element line. `line` is the source line it came from and is ignored
/// by equality, so re-emitted netlists compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceLine {
    pub kind: DeviceKind,
    pub id: String,
    pub pins: Vec<String>,
    /// Model name for MOSFETs/diodes, subcircuit name for instances.
    pub model: Option<String>,
    pub params: BTreeMap<String, f64>,
    pub line: usize,
}

impl PartialEq for DeviceLine {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.id == other.id
            && self.pins == other.pins
            && self.model == other.model
            && self.params == other.params
    }
}

impl DeviceLine {
    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    /// Principal value of R/C/L.
    pub fn value(&self) -> f64 {
        self.param("value").unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Nmos1,
    Pmos1,
    Diode,
}

/// Level-1 MOSFET or junction diode parameters. `vth` is stored as a
/// magnitude for both polarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub name: String,
    pub kind: ModelKind,
    pub vth: f64,
    pub kp: f64,
    pub lambda: f64,
    pub is_sat: f64,
    pub n: f64,
}

impl ModelCard {
    pub fn nmos(name: &str) -> Self {
        ModelCard {
            name: name.into(),
            kind: ModelKind::Nmos1,
            vth: 0.5,
            kp: 200e-6,
            lambda: 0.0,
            is_sat: 0.0,
            n: 1.0,
        }
    }

    pub fn pmos(name: &str) -> Self {
        ModelCard {
            kind: ModelKind::Pmos1,
            kp: 100e-6,
            ..ModelCard::nmos(name)
        }
    }

    pub fn diode(name: &str) -> Self {
        ModelCard {
            name: name.into(),
            kind: ModelKind::Diode,
            vth: 0.0,
            kp: 0.0,
            lambda: 0.0,
            is_sat: 1e-14,
            n: 1.0,
        }
    }

    /// Models available without a `.model` card.
    pub fn builtin(name: &str) -> Option<ModelCard> {
        match name.to_ascii_lowercase().as_str() {
            "nmos" => Some(ModelCard::nmos("nmos")),
            "pmos" => Some(ModelCard::pmos("pmos")),
            "d" => Some(ModelCard::diode("d")),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcSweepKind {
    Dec,
    Lin,
    Oct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnalysisDirective {
    Op,
    Dc {
        source: String,
        start: f64,
        stop: f64,
        step: f64,
    },
    Ac {
        sweep: AcSweepKind,
        points: u32,
        fstart: f64,
        fstop: f64,
    },
    Tran {
        tstep: f64,
        tstop: f64,
        uic: bool,
    },
}

impl AnalysisDirective {
    pub fn kind(&self) -> crate::model::AnalysisKind {
        use crate::model::AnalysisKind;
        match self {
            AnalysisDirective::Op => AnalysisKind::Op,
            AnalysisDirective::Dc { .. } => AnalysisKind::Dc,
            AnalysisDirective::Ac { .. } => AnalysisKind::Ac,
            AnalysisDirective::Tran { .. } => AnalysisKind::Tran,
        }
    }
}

/// The designated bias source and its sweep range for bias repair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDirective {
    pub source: String,
    pub lo: f64,
    pub hi: f64,
    pub points: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubcktDef {
    pub name: String,
    pub pins: Vec<String>,
    pub body: Netlist,
    pub line: usize,
}

impl PartialEq for SubcktDef {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.pins == other.pins && self.body == other.body
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Netlist {
    pub devices: Vec<DeviceLine>,
    pub subcircuits: Vec<SubcktDef>,
    pub analyses: Vec<AnalysisDirective>,
    /// Keyed by lowercased model name.
    pub models: BTreeMap<String, ModelCard>,
    pub initial_conditions: BTreeMap<String, f64>,
    pub bias: Option<BiasDirective>,
}

pub fn is_ground(node: &str) -> bool {
    node == "0" || node.eq_ignore_ascii_case("gnd")
}

impl Netlist {
    pub fn device(&self, id: &str) -> Option<&DeviceLine> {
        self.devices.iter().find(|d| d.id.eq_ignore_ascii_case(id))
    }

    pub fn subckt(&self, name: &str) -> Option<&SubcktDef> {
        self.subcircuits
            .iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
    }

    /// Resolve a model name against the cards and the built-ins.
    pub fn model(&self, name: &str) -> Option<ModelCard> {
        self.models
            .get(&name.to_ascii_lowercase())
            .cloned()
            .or_else(|| ModelCard::builtin(name))
    }

    /// Distinct node names of this scope in first-reference order.
    pub fn nodes(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for d in &self.devices {
            for p in &d.pins {
                if seen.insert(p.to_ascii_lowercase()) {
                    out.push(p.clone());
                }
            }
        }
        out
    }

    pub fn has_analysis(&self, kind: crate::model::AnalysisKind) -> bool {
        self.analyses.iter().any(|a| a.kind() == kind)
    }

    /// Expand subcircuit instances recursively. Internal devices become
    /// `X1.M1`, internal nodes `X1.n`; ground stays global. Instances of
    /// undefined (or recursively defined) subcircuits are dropped and
    /// reported by name.
    pub fn flatten(&self) -> (Netlist, Vec<String>) {
        let mut out = Netlist {
            devices: Vec::new(),
            subcircuits: Vec::new(),
            analyses: self.analyses.clone(),
            models: self.models.clone(),
            initial_conditions: self.initial_conditions.clone(),
            bias: self.bias.clone(),
        };
        let mut unresolved = Vec::new();
        for d in &self.devices {
            self.expand(d, "", &BTreeMap::new(), d.line, 0, &mut out.devices, &mut unresolved);
        }
        (out, unresolved)
    }

    #[allow(clippy::too_many_arguments)]
    fn expand(
        &self,
        d: &DeviceLine,
        prefix: &str,
        pin_map: &BTreeMap<String, String>,
        line: usize,
        depth: usize,
        out: &mut Vec<DeviceLine>,
        unresolved: &mut Vec<String>,
    ) {
        let map_node = |n: &str| -> String {
            if is_ground(n) {
                return n.to_string();
            }
            if prefix.is_empty() {
                return n.to_string();
            }
            pin_map
                .get(&n.to_ascii_lowercase())
                .cloned()
                .unwrap_or_else(|| format!("{prefix}{n}"))
        };
        let pins: Vec<String> = d.pins.iter().map(|p| map_node(p)).collect();
        if d.kind != DeviceKind::SubcktInstance {
            out.push(DeviceLine {
                id: format!("{prefix}{}", d.id),
                pins,
                line,
                ..d.clone()
            });
            return;
        }
        let name = d.model.clone().unwrap_or_default();
        let def = match self.subckt(&name) {
            Some(def) if depth < 16 && def.pins.len() == pins.len() => def,
            _ => {
                unresolved.push(name);
                return;
            }
        };
        let inner_prefix = format!("{prefix}{}.", d.id);
        let inner_map: BTreeMap<String, String> = def
            .pins
            .iter()
            .map(|p| p.to_ascii_lowercase())
            .zip(pins)
            .collect();
        for inner in &def.body.devices {
            self.expand(inner, &inner_prefix, &inner_map, line, depth + 1, out, unresolved);
        }
    }
}

/// Parse a SPICE number with optional scale suffix and trailing unit letters.
pub fn parse_value(text: &str) -> Option<f64> {
    let s = text.trim();
    let bytes = s.as_bytes();
    let mut i = 0;
    if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
        i += 1;
    }
    let digits_start = i;
    while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
        i += 1;
    }
    if i == digits_start || !s[digits_start..i].bytes().any(|b| b.is_ascii_digit()) {
        return None;
    }
    let mantissa_end = i;
    let mut exp: i32 = 0;
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        let mut j = i + 1;
        if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
            j += 1;
        }
        let ds = j;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        if j > ds {
            exp = s[i + 1..j].parse().ok()?;
            i = j;
        }
    }
    let rest = s[i..].to_lowercase();
    let scale = if rest.starts_with("meg") {
        6
    } else if rest.starts_with("mil") {
        // 25.4e-6 is not a power of ten; handled separately below.
        let base: f64 = s[..mantissa_end].parse().ok()?;
        let v = format!("{base}e{exp}").parse::<f64>().ok()? * 25.4e-6;
        return rest[3..].chars().all(|c| c.is_alphabetic()).then_some(v);
    } else {
        match rest.chars().next() {
            None => 0,
            Some('t') => 12,
            Some('g') => 9,
            Some('k') => 3,
            Some('m') => -3,
            Some('u') | Some('µ') => -6,
            Some('n') => -9,
            Some('p') => -12,
            Some('f') => -15,
            Some(c) if c.is_alphabetic() => 0,
            Some(_) => return None,
        }
    };
    if !rest.chars().all(|c| c.is_alphabetic()) {
        return None;
    }
    // Fold the scale into the decimal exponent so the result is correctly rounded.
    let v: f64 = format!("{}e{}", &s[..mantissa_end], exp + scale).parse().ok()?;
    v.is_finite().then_some(v)
}

/// Canonical number rendering; `parse_value` reads it back exactly.
pub fn format_value(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-3..1e6).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn emit_device(out: &mut String, d: &DeviceLine) {
    let _ = write!(out, "{}", d.id);
    for p in &d.pins {
        let _ = write!(out, " {p}");
    }
    match d.kind {
        DeviceKind::R | DeviceKind::L | DeviceKind::C => {
            let _ = write!(out, " {}", format_value(d.value()));
            if let Some(ic) = d.param("ic") {
                let _ = write!(out, " ic={}", format_value(ic));
            }
        }
        DeviceKind::V | DeviceKind::I => {
            let _ = write!(out, " DC {}", format_value(d.param("dc").unwrap_or(0.0)));
            if let Some(m) = d.param("ac_mag") {
                let _ = write!(
                    out,
                    " AC {} {}",
                    format_value(m),
                    format_value(d.param("ac_phase").unwrap_or(0.0))
                );
            }
            if d.param("sin_vo").is_some() {
                let vals: Vec<String> = SIN_KEYS
                    .iter()
                    .map(|k| format_value(d.param(k).unwrap_or(0.0)))
                    .collect();
                let _ = write!(out, " SIN({})", vals.join(" "));
            }
            if d.param("pulse_v1").is_some() {
                let vals: Vec<String> = PULSE_KEYS
                    .iter()
                    .map(|k| format_value(d.param(k).unwrap_or(0.0)))
                    .collect();
                let _ = write!(out, " PULSE({})", vals.join(" "));
            }
        }
        DeviceKind::Mosfet => {
            let _ = write!(
                out,
                " {} W={} L={}",
                d.model.as_deref().unwrap_or("nmos"),
                format_value(d.param("w").unwrap_or(1.0)),
                format_value(d.param("l").unwrap_or(1.0))
            );
        }
        DeviceKind::Diode => {
            let _ = write!(out, " {}", d.model.as_deref().unwrap_or("d"));
        }
        DeviceKind::SubcktInstance => {
            let _ = write!(out, " {}", d.model.as_deref().unwrap_or(""));
        }
    }
    out.push('\n');
}

/// Canonical text form. `parse(&emit(n))` is structurally equal to `n`.
pub fn emit(n: &Netlist) -> String {
    let mut out = String::new();
    for m in n.models.values() {
        let kind = match m.kind {
            ModelKind::Nmos1 => "nmos",
            ModelKind::Pmos1 => "pmos",
            ModelKind::Diode => "d",
        };
        match m.kind {
            ModelKind::Diode => {
                let _ = writeln!(
                    out,
                    ".model {} d (is={} n={})",
                    m.name,
                    format_value(m.is_sat),
                    format_value(m.n)
                );
            }
            _ => {
                let vto = if m.kind == ModelKind::Pmos1 { -m.vth } else { m.vth };
                let _ = writeln!(
                    out,
                    ".model {} {kind} (vto={} kp={} lambda={})",
                    m.name,
                    format_value(vto),
                    format_value(m.kp),
                    format_value(m.lambda)
                );
            }
        }
    }
    for s in &n.subcircuits {
        let _ = writeln!(out, ".subckt {} {}", s.name, s.pins.join(" "));
        for d in &s.body.devices {
            emit_device(&mut out, d);
        }
        let _ = writeln!(out, ".ends {}", s.name);
    }
    for d in &n.devices {
        emit_device(&mut out, d);
    }
    for a in &n.analyses {
        let _ = match a {
            AnalysisDirective::Op => writeln!(out, ".op"),
            AnalysisDirective::Dc {
                source,
                start,
                stop,
                step,
            } => writeln!(
                out,
                ".dc {source} {} {} {}",
                format_value(*start),
                format_value(*stop),
                format_value(*step)
            ),
            AnalysisDirective::Ac {
                sweep,
                points,
                fstart,
                fstop,
            } => writeln!(
                out,
                ".ac {} {points} {} {}",
                match sweep {
                    AcSweepKind::Dec => "dec",
                    AcSweepKind::Lin => "lin",
                    AcSweepKind::Oct => "oct",
                },
                format_value(*fstart),
                format_value(*fstop)
            ),
            AnalysisDirective::Tran { tstep, tstop, uic } => writeln!(
                out,
                ".tran {} {}{}",
                format_value(*tstep),
                format_value(*tstop),
                if *uic { " uic" } else { "" }
            ),
        };
    }
    if !n.initial_conditions.is_empty() {
        out.push_str(".ic");
        for (node, v) in &n.initial_conditions {
            let _ = write!(out, " V({node})={}", format_value(*v));
        }
        out.push('\n');
    }
    if let Some(b) = &n.bias {
        let _ = writeln!(
            out,
            ".bias {} {} {} {}",
            b.source,
            format_value(b.lo),
            format_value(b.hi),
            b.points
        );
    }
    out.push_str(".end\n");
    out
}

impl fmt::Display for Netlist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&emit(self))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    SyntaxError {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("line {line}: duplicate identifier {id} in scope {scope}")]
    DuplicateIdentifier {
        id: String,
        line: usize,
        scope: String,
    },
    #[error("line {line}: {id} expects {expected} terminals, found {found}")]
    ArityMismatch {
        id: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {id} references unknown model {model}")]
    UnknownModel {
        id: String,
        model: String,
        line: usize,
    },
}

impl ParseError {
    /// Normalized failure key: the class plus the offending identifier.
    pub fn signature(&self) -> String {
        match self {
            ParseError::SyntaxError { .. } => "syntax-error".into(),
            ParseError::DuplicateIdentifier { id, .. } => format!("duplicate-identifier:{id}"),
            ParseError::ArityMismatch { id, .. } => format!("arity-mismatch:{id}"),
            ParseError::UnknownModel { model, .. } => format!("unknown-model:{model}"),
        }
    }

    pub fn line(&self) -> usize {
        match self {
            ParseError::SyntaxError { line, .. }
            | ParseError::DuplicateIdentifier { line, .. }
            | ParseError::ArityMismatch { line, .. }
            | ParseError::UnknownModel { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPatch {
    pub device_id: String,
    pub param: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PatchError {
    #[error("no device named {0}")]
    UnknownDevice(String),
    #[error("parameter {param} is not patchable on {device_id}")]
    IllegalParam { device_id: String, param: String },
}

/// Return a copy of `n` with one top-level device parameter replaced.
pub fn apply_patch(n: &Netlist, patch: &ParamPatch) -> Result<Netlist, PatchError> {
    let idx = n
        .devices
        .iter()
        .position(|d| d.id.eq_ignore_ascii_case(&patch.device_id))
        .ok_or_else(|| PatchError::UnknownDevice(patch.device_id.clone()))?;
    let key = patch.param.to_ascii_lowercase();
    if !n.devices[idx].kind.legal_params().contains(&key.as_str()) || !patch.value.is_finite() {
        return Err(PatchError::IllegalParam {
            device_id: patch.device_id.clone(),
            param: patch.param.clone(),
        });
    }
    let mut out = n.clone();
    out.devices[idx].params.insert(key, patch.value);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn suffix_table() {
        assert_eq!(parse_value("1k"), Some(1000.0));
        assert_eq!(parse_value("1meg"), Some(1e6));
        assert_eq!(parse_value("1MEG"), Some(1e6));
        assert_eq!(parse_value("1m"), Some(1e-3));
        assert_eq!(parse_value("1M"), Some(1e-3));
        assert_eq!(parse_value("10u"), Some(10e-6));
        assert_eq!(parse_value("10µF"), Some(10e-6));
        assert_eq!(parse_value("2.2n"), Some(2.2e-9));
        assert_eq!(parse_value("4.7p"), Some(4.7e-12));
        assert_eq!(parse_value("3g"), Some(3e9));
        assert_eq!(parse_value("1e3"), Some(1000.0));
        assert_eq!(parse_value("1e-3k"), Some(1.0));
        assert_eq!(parse_value("5V"), Some(5.0));
        assert_eq!(parse_value("-0.5"), Some(-0.5));
        assert_eq!(parse_value(".5"), Some(0.5));
        assert_eq!(parse_value("1kohm"), Some(1000.0));
        assert_eq!(parse_value("abc"), None);
        assert_eq!(parse_value("1k2"), None);
        assert_eq!(parse_value(""), None);
    }

    #[test]
    fn patch_and_patch_back() {
        let n = parse("Vbias in 0 DC 0.8\nR1 in 0 1k\n").unwrap();
        let p = apply_patch(
            &n,
            &ParamPatch {
                device_id: "Vbias".into(),
                param: "dc".into(),
                value: 1.2,
            },
        )
        .unwrap();
        assert_eq!(p.device("Vbias").unwrap().param("dc"), Some(1.2));
        assert_eq!(p.devices[1], n.devices[1]);
        assert_eq!(n.device("Vbias").unwrap().param("dc"), Some(0.8));
        let back = apply_patch(
            &p,
            &ParamPatch {
                device_id: "vbias".into(),
                param: "DC".into(),
                value: 0.8,
            },
        )
        .unwrap();
        assert_eq!(back, n);
    }

    #[test]
    fn patch_errors() {
        let n = parse("R1 a 0 1k\nV1 a 0 1\n").unwrap();
        let unknown = ParamPatch {
            device_id: "M9".into(),
            param: "w".into(),
            value: 1.0,
        };
        assert_eq!(apply_patch(&n, &unknown), Err(PatchError::UnknownDevice("M9".into())));
        let illegal = ParamPatch {
            device_id: "R1".into(),
            param: "w".into(),
            value: 1.0,
        };
        assert!(matches!(apply_patch(&n, &illegal), Err(PatchError::IllegalParam { .. })));
    }

    #[test]
    fn flatten_prefixes_internal_names() {
        let src = "\
.subckt buf in out vdd
M1 vdd in out 0 nmos W=2u L=1u
R1 out 0 10k
Rint in mid 1k
Rb mid 0 1k
.ends buf
V1 vdd 0 5
X1 a y vdd buf
R2 a 0 1k
";
        let n = parse(src).unwrap();
        let (flat, unresolved) = n.flatten();
        assert!(unresolved.is_empty());
        let ids: Vec<&str> = flat.devices.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["V1", "X1.M1", "X1.R1", "X1.Rint", "X1.Rb", "R2"]);
        assert_eq!(flat.device("X1.M1").unwrap().pins, ["vdd", "a", "y", "0"]);
        assert_eq!(flat.device("X1.Rint").unwrap().pins, ["a", "X1.mid"]);
    }

    proptest! {
        #[test]
        fn meg_and_milli_exact(mantissa in 1u32..1000, upper in any::<bool>()) {
            let meg = if upper { "MEG" } else { "meg" };
            let m = if upper { "M" } else { "m" };
            prop_assert_eq!(parse_value(&format!("{mantissa}{meg}")), Some(mantissa as f64 * 1e6));
            let expect: f64 = format!("{mantissa}e-3").parse().unwrap();
            prop_assert_eq!(parse_value(&format!("{mantissa}{m}")), Some(expect));
        }

        #[test]
        fn format_value_roundtrips(v in prop::num::f64::NORMAL) {
            prop_assert_eq!(parse_value(&format_value(v)), Some(v));
        }
    }
}
