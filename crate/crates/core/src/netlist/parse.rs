use std::collections::{BTreeMap, BTreeSet};

use super::{
    is_ground, AcSweepKind, AnalysisDirective, BiasDirective, DeviceKind, DeviceLine, ModelCard,
    ModelKind, Netlist, ParseError, SubcktDef, PULSE_KEYS, SIN_KEYS,
};
use super::parse_value;

#[derive(Debug, Clone)]
struct Tok {
    text: String,
    line: usize,
    col: usize,
}

/// A logical statement after joining `+` continuations.
struct Stmt {
    toks: Vec<Tok>,
    line: usize,
}

fn tokenize_line(line_no: usize, text: &str, out: &mut Vec<Tok>) {
    let mut cur = String::new();
    let mut start = 0;
    let flush = |cur: &mut String, start: usize, out: &mut Vec<Tok>| {
        if !cur.is_empty() {
            out.push(Tok {
                text: std::mem::take(cur),
                line: line_no,
                col: start,
            });
        }
    };
    for (i, c) in text.chars().enumerate() {
        let col = i + 1;
        match c {
            ';' => break,
            c if c.is_whitespace() || c == ',' => flush(&mut cur, start, out),
            '(' | ')' | '=' => {
                flush(&mut cur, start, out);
                out.push(Tok {
                    text: c.to_string(),
                    line: line_no,
                    col,
                });
            }
            _ => {
                if cur.is_empty() {
                    start = col;
                }
                cur.push(c);
            }
        }
    }
    flush(&mut cur, start, out);
}

fn statements(source: &str) -> Result<Vec<Stmt>, ParseError> {
    let mut out: Vec<Stmt> = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('*') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('+') {
            let offset = raw.len() - rest.len();
            let Some(last) = out.last_mut() else {
                return Err(ParseError::SyntaxError {
                    line: line_no,
                    col: offset,
                    message: "continuation line without a statement".into(),
                });
            };
            let mut toks = Vec::new();
            tokenize_line(line_no, rest, &mut toks);
            for t in &mut toks {
                t.col += offset;
            }
            last.toks.extend(toks);
            continue;
        }
        let mut toks = Vec::new();
        tokenize_line(line_no, raw, &mut toks);
        if !toks.is_empty() {
            out.push(Stmt {
                toks,
                line: line_no,
            });
        }
    }
    Ok(out)
}

fn syntax(t: &Tok, message: impl Into<String>) -> ParseError {
    ParseError::SyntaxError {
        line: t.line,
        col: t.col,
        message: message.into(),
    }
}

fn end_of(stmt: &Stmt, message: impl Into<String>) -> ParseError {
    let last = stmt.toks.last().expect("statements are non-empty");
    ParseError::SyntaxError {
        line: last.line,
        col: last.col + last.text.chars().count(),
        message: message.into(),
    }
}

fn number(t: &Tok) -> Result<f64, ParseError> {
    parse_value(&t.text).ok_or_else(|| syntax(t, format!("expected a number, found '{}'", t.text)))
}

/// Cursor over one statement's tokens.
struct Cursor<'a> {
    stmt: &'a Stmt,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a Tok> {
        self.stmt.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.stmt.toks.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, what: &str) -> Result<&'a Tok, ParseError> {
        self.next()
            .ok_or_else(|| end_of(self.stmt, format!("expected {what}")))
    }

    fn expect_text(&mut self, text: &str) -> Result<(), ParseError> {
        let t = self.expect(&format!("'{text}'"))?;
        if t.text == text {
            Ok(())
        } else {
            Err(syntax(t, format!("expected '{text}', found '{}'", t.text)))
        }
    }

    /// `key = value` pairs until the end of the statement.
    fn key_values(&mut self) -> Result<Vec<(&'a Tok, f64)>, ParseError> {
        let mut out = Vec::new();
        while let Some(k) = self.next() {
            if k.text == "(" || k.text == ")" {
                continue;
            }
            self.expect_text("=")?;
            let v = self.expect("a value")?;
            out.push((k, number(v)?));
        }
        Ok(out)
    }
}

/// Positional tokens before the first `key=` pair.
fn positional_count(stmt: &Stmt) -> usize {
    let toks = &stmt.toks;
    let mut n = 0;
    for i in 1..toks.len() {
        if toks.get(i + 1).is_some_and(|t| t.text == "=") {
            break;
        }
        n += 1;
    }
    n
}

fn parse_source(cur: &mut Cursor, params: &mut BTreeMap<String, f64>) -> Result<(), ParseError> {
    let mut dc_seen = false;
    while let Some(t) = cur.next() {
        let word = t.text.to_ascii_lowercase();
        match word.as_str() {
            "dc" => {
                let v = cur.expect("a DC value")?;
                params.insert("dc".into(), number(v)?);
                dc_seen = true;
            }
            "ac" => {
                let m = cur.expect("an AC magnitude")?;
                params.insert("ac_mag".into(), number(m)?);
                let phase = match cur.peek() {
                    Some(p) if parse_value(&p.text).is_some() => {
                        cur.next();
                        parse_value(&p.text).unwrap_or(0.0)
                    }
                    _ => 0.0,
                };
                params.insert("ac_phase".into(), phase);
            }
            "sin" | "pulse" => {
                let keys: &[&str] = if word == "sin" { &SIN_KEYS } else { &PULSE_KEYS };
                let min = if word == "sin" { 3 } else { keys.len() };
                cur.expect_text("(")?;
                let mut vals = Vec::new();
                loop {
                    let v = cur.expect("')'")?;
                    if v.text == ")" {
                        break;
                    }
                    vals.push(number(v)?);
                }
                if vals.len() < min || vals.len() > keys.len() {
                    return Err(syntax(
                        t,
                        format!("{} takes {min}..{} arguments, found {}", word.to_uppercase(), keys.len(), vals.len()),
                    ));
                }
                for (i, k) in keys.iter().enumerate() {
                    params.insert(k.to_string(), vals.get(i).copied().unwrap_or(0.0));
                }
            }
            _ => {
                if dc_seen || parse_value(&t.text).is_none() {
                    return Err(syntax(t, format!("unexpected '{}' in source specification", t.text)));
                }
                params.insert("dc".into(), number(t)?);
                dc_seen = true;
            }
        }
    }
    params.entry("dc".into()).or_insert(0.0);
    Ok(())
}

fn arity(id: &str, line: usize, expected: usize, found: usize) -> ParseError {
    ParseError::ArityMismatch {
        id: id.to_string(),
        line,
        expected,
        found,
    }
}

fn parse_device(stmt: &Stmt) -> Result<DeviceLine, ParseError> {
    let head = &stmt.toks[0];
    let id = head.text.clone();
    let kind = id
        .chars()
        .next()
        .and_then(DeviceKind::from_letter)
        .ok_or_else(|| syntax(head, format!("unknown element '{id}'")))?;
    let mut params = BTreeMap::new();
    let mut cur = Cursor { stmt, pos: 1 };
    let line = stmt.line;
    let positional = positional_count(stmt);
    let pins: Vec<String>;
    let mut model = None;
    match kind {
        DeviceKind::R | DeviceKind::C | DeviceKind::L => {
            if positional != 3 {
                return Err(arity(&id, line, 2, positional.saturating_sub(1)));
            }
            pins = vec![cur.next().unwrap().text.clone(), cur.next().unwrap().text.clone()];
            let v = cur.next().unwrap();
            params.insert("value".into(), number(v)?);
            for (k, v) in cur.key_values()? {
                match (kind, k.text.to_ascii_lowercase().as_str()) {
                    (DeviceKind::C, "ic") => {
                        params.insert("ic".into(), v);
                    }
                    _ => return Err(syntax(k, format!("unknown parameter '{}'", k.text))),
                }
            }
        }
        DeviceKind::V | DeviceKind::I => {
            let nodes: Vec<&Tok> = stmt.toks[1..].iter().take(2).collect();
            if nodes.len() < 2 || nodes.iter().any(|t| t.text == "(" || t.text == "=") {
                return Err(arity(&id, line, 2, nodes.len()));
            }
            pins = nodes.iter().map(|t| t.text.clone()).collect();
            cur.pos = 3;
            parse_source(&mut cur, &mut params)?;
        }
        DeviceKind::Mosfet => {
            if positional != 5 {
                return Err(arity(&id, line, 4, positional.saturating_sub(1)));
            }
            pins = (0..4).map(|_| cur.next().unwrap().text.clone()).collect();
            model = Some(cur.next().unwrap().text.clone());
            params.insert("w".into(), 1.0);
            params.insert("l".into(), 1.0);
            for (k, v) in cur.key_values()? {
                let key = k.text.to_ascii_lowercase();
                if key != "w" && key != "l" {
                    return Err(syntax(k, format!("unknown parameter '{}'", k.text)));
                }
                if v <= 0.0 {
                    return Err(syntax(k, format!("{} must be positive", k.text)));
                }
                params.insert(key, v);
            }
        }
        DeviceKind::Diode => {
            if !(2..=3).contains(&positional) || positional != stmt.toks.len() - 1 {
                return Err(arity(&id, line, 2, positional.min(2)));
            }
            pins = vec![cur.next().unwrap().text.clone(), cur.next().unwrap().text.clone()];
            model = Some(cur.next().map(|t| t.text.clone()).unwrap_or_else(|| "d".into()));
        }
        DeviceKind::SubcktInstance => {
            if positional != stmt.toks.len() - 1 {
                let t = &stmt.toks[positional + 1];
                return Err(syntax(t, "instance parameters are not supported"));
            }
            if positional < 2 {
                return Err(end_of(stmt, "expected pins followed by a subcircuit name"));
            }
            let names: Vec<String> = stmt.toks[1..].iter().map(|t| t.text.clone()).collect();
            model = names.last().cloned();
            pins = names[..names.len() - 1].to_vec();
        }
    }
    if let Some(t) = stmt.toks[1..]
        .iter()
        .take(pins.len())
        .find(|t| t.text == "(" || t.text == ")" || t.text == "=")
    {
        return Err(syntax(t, format!("unexpected '{}' in node list", t.text)));
    }
    Ok(DeviceLine {
        kind,
        id,
        pins,
        model,
        params,
        line,
    })
}

fn parse_model(stmt: &Stmt) -> Result<ModelCard, ParseError> {
    let mut cur = Cursor { stmt, pos: 1 };
    let name = cur.expect("a model name")?.text.clone();
    let ty = cur.expect("a model type")?;
    let mut card = match ty.text.to_ascii_lowercase().as_str() {
        "nmos" => ModelCard::nmos(&name),
        "pmos" => ModelCard::pmos(&name),
        "d" => ModelCard::diode(&name),
        other => return Err(syntax(ty, format!("unsupported model type '{other}'"))),
    };
    for (k, v) in cur.key_values()? {
        match (card.kind, k.text.to_ascii_lowercase().as_str()) {
            (ModelKind::Nmos1 | ModelKind::Pmos1, "vto" | "vth") => card.vth = v.abs(),
            (ModelKind::Nmos1 | ModelKind::Pmos1, "kp") if v > 0.0 => card.kp = v,
            (ModelKind::Nmos1 | ModelKind::Pmos1, "lambda") if v >= 0.0 => card.lambda = v,
            (ModelKind::Diode, "is") if v > 0.0 => card.is_sat = v,
            (ModelKind::Diode, "n") if v > 0.0 => card.n = v,
            _ => return Err(syntax(k, format!("bad model parameter '{}={}'", k.text, v))),
        }
    }
    Ok(card)
}

fn parse_analysis(stmt: &Stmt, word: &str) -> Result<AnalysisDirective, ParseError> {
    let mut cur = Cursor { stmt, pos: 1 };
    let mut num = |what: &str| -> Result<f64, ParseError> { number(cur.expect(what)?) };
    let a = match word {
        ".op" => AnalysisDirective::Op,
        ".dc" => {
            let source = stmt
                .toks
                .get(1)
                .ok_or_else(|| end_of(stmt, "expected a source name"))?
                .text
                .clone();
            let mut c2 = Cursor { stmt, pos: 2 };
            let mut n2 = |what: &str| -> Result<f64, ParseError> { number(c2.expect(what)?) };
            let start = n2("start")?;
            let stop = n2("stop")?;
            let step = n2("step")?;
            if !(step > 0.0) || stop < start {
                return Err(syntax(&stmt.toks[0], ".dc needs start <= stop and step > 0"));
            }
            if stmt.toks.len() > 5 {
                return Err(syntax(&stmt.toks[5], "trailing tokens after .dc"));
            }
            return Ok(AnalysisDirective::Dc {
                source,
                start,
                stop,
                step,
            });
        }
        ".ac" => {
            let kind_tok = stmt
                .toks
                .get(1)
                .ok_or_else(|| end_of(stmt, "expected dec, lin or oct"))?;
            let sweep = match kind_tok.text.to_ascii_lowercase().as_str() {
                "dec" => AcSweepKind::Dec,
                "lin" => AcSweepKind::Lin,
                "oct" => AcSweepKind::Oct,
                _ => return Err(syntax(kind_tok, "expected dec, lin or oct")),
            };
            let mut c2 = Cursor { stmt, pos: 2 };
            let pts_tok = c2.expect("a point count")?;
            let points = number(pts_tok)?;
            if points < 1.0 || points.fract() != 0.0 || points > 1e6 {
                return Err(syntax(pts_tok, "point count must be a positive integer"));
            }
            let fstart = number(c2.expect("fstart")?)?;
            let fstop = number(c2.expect("fstop")?)?;
            if !(fstart > 0.0) || fstop < fstart {
                return Err(syntax(kind_tok, ".ac needs 0 < fstart <= fstop"));
            }
            if let Some(t) = c2.peek() {
                return Err(syntax(t, "trailing tokens after .ac"));
            }
            return Ok(AnalysisDirective::Ac {
                sweep,
                points: points as u32,
                fstart,
                fstop,
            });
        }
        ".tran" => {
            let tstep = num("tstep")?;
            let tstop = num("tstop")?;
            let mut uic = false;
            if let Some(t) = stmt.toks.get(3) {
                if t.text.eq_ignore_ascii_case("uic") && stmt.toks.len() == 4 {
                    uic = true;
                } else {
                    return Err(syntax(t, "trailing tokens after .tran"));
                }
            }
            if !(tstep > 0.0) || tstop < tstep {
                return Err(syntax(&stmt.toks[0], ".tran needs tstep > 0 and tstop >= tstep"));
            }
            AnalysisDirective::Tran { tstep, tstop, uic }
        }
        _ => unreachable!(),
    };
    if word == ".op" && stmt.toks.len() > 1 {
        return Err(syntax(&stmt.toks[1], "trailing tokens after .op"));
    }
    Ok(a)
}

fn parse_ic(stmt: &Stmt, into: &mut BTreeMap<String, f64>) -> Result<(), ParseError> {
    let mut cur = Cursor { stmt, pos: 1 };
    while let Some(t) = cur.next() {
        if !t.text.eq_ignore_ascii_case("v") {
            return Err(syntax(t, "expected V(node)=value"));
        }
        cur.expect_text("(")?;
        let node = cur.expect("a node name")?.text.clone();
        cur.expect_text(")")?;
        cur.expect_text("=")?;
        let v = number(cur.expect("a value")?)?;
        into.insert(node, v);
    }
    if into.is_empty() {
        return Err(end_of(stmt, "expected V(node)=value"));
    }
    Ok(())
}

fn parse_bias(stmt: &Stmt) -> Result<BiasDirective, ParseError> {
    let mut cur = Cursor { stmt, pos: 1 };
    let source = cur.expect("a source name")?.text.clone();
    let lo = number(cur.expect("lo")?)?;
    let hi = number(cur.expect("hi")?)?;
    let points = match cur.next() {
        Some(t) => {
            let p = number(t)?;
            if p < 2.0 || p.fract() != 0.0 || p > 1e5 {
                return Err(syntax(t, "points must be an integer >= 2"));
            }
            p as u32
        }
        None => 101,
    };
    if let Some(t) = cur.peek() {
        return Err(syntax(t, "trailing tokens after .bias"));
    }
    if !(hi > lo) {
        return Err(syntax(&stmt.toks[0], ".bias needs lo < hi"));
    }
    Ok(BiasDirective {
        source,
        lo,
        hi,
        points,
    })
}

struct Scope {
    name: String,
    seen: BTreeSet<String>,
}

impl Scope {
    fn admit(&mut self, d: &DeviceLine) -> Result<(), ParseError> {
        if self.seen.insert(d.id.to_ascii_lowercase()) {
            Ok(())
        } else {
            Err(ParseError::DuplicateIdentifier {
                id: d.id.clone(),
                line: d.line,
                scope: self.name.clone(),
            })
        }
    }
}

/// Parse netlist text. Never panics; every input yields a netlist or an error.
pub fn parse(source: &str) -> Result<Netlist, ParseError> {
    let stmts = statements(source)?;
    let mut top = Netlist::default();
    let mut top_scope = Scope {
        name: "top".into(),
        seen: BTreeSet::new(),
    };
    let mut open: Option<(SubcktDef, Scope)> = None;
    let mut ended = false;

    for stmt in &stmts {
        let head = &stmt.toks[0];
        if ended {
            return Err(syntax(head, "statement after .end"));
        }
        let word = head.text.to_ascii_lowercase();
        if !word.starts_with('.') {
            let d = parse_device(stmt)?;
            match open.as_mut() {
                Some((def, scope)) => {
                    scope.admit(&d)?;
                    def.body.devices.push(d);
                }
                None => {
                    top_scope.admit(&d)?;
                    top.devices.push(d);
                }
            }
            continue;
        }
        match word.as_str() {
            ".subckt" => {
                if open.is_some() {
                    return Err(syntax(head, "nested .subckt definitions are not supported"));
                }
                let name = stmt
                    .toks
                    .get(1)
                    .ok_or_else(|| end_of(stmt, "expected a subcircuit name"))?;
                if top.subckt(&name.text).is_some() {
                    return Err(ParseError::DuplicateIdentifier {
                        id: name.text.clone(),
                        line: stmt.line,
                        scope: "subcircuits".into(),
                    });
                }
                let pins: Vec<String> = stmt.toks[2..].iter().map(|t| t.text.clone()).collect();
                if let Some(t) = stmt.toks[2..]
                    .iter()
                    .find(|t| matches!(t.text.as_str(), "(" | ")" | "="))
                {
                    return Err(syntax(t, "subcircuit parameters are not supported"));
                }
                let mut uniq = BTreeSet::new();
                for (p, t) in pins.iter().zip(&stmt.toks[2..]) {
                    if !uniq.insert(p.to_ascii_lowercase()) || is_ground(p) {
                        return Err(syntax(t, format!("bad subcircuit pin '{p}'")));
                    }
                }
                open = Some((
                    SubcktDef {
                        name: name.text.clone(),
                        pins,
                        body: Netlist::default(),
                        line: stmt.line,
                    },
                    Scope {
                        name: name.text.clone(),
                        seen: BTreeSet::new(),
                    },
                ));
            }
            ".ends" => {
                let Some((def, _)) = open.take() else {
                    return Err(syntax(head, ".ends without .subckt"));
                };
                if let Some(t) = stmt.toks.get(1) {
                    if !t.text.eq_ignore_ascii_case(&def.name) || stmt.toks.len() > 2 {
                        return Err(syntax(t, format!(".ends does not match .subckt {}", def.name)));
                    }
                }
                top.subcircuits.push(def);
            }
            ".model" => {
                let card = parse_model(stmt)?;
                let key = card.name.to_ascii_lowercase();
                if top.models.contains_key(&key) {
                    return Err(ParseError::DuplicateIdentifier {
                        id: card.name,
                        line: stmt.line,
                        scope: "models".into(),
                    });
                }
                top.models.insert(key, card);
            }
            ".op" | ".dc" | ".ac" | ".tran" => {
                if open.is_some() {
                    return Err(syntax(head, "analysis directive inside .subckt"));
                }
                top.analyses.push(parse_analysis(stmt, &word)?);
            }
            ".ic" => parse_ic(stmt, &mut top.initial_conditions)?,
            ".bias" => {
                if top.bias.is_some() {
                    return Err(syntax(head, "only one .bias directive is allowed"));
                }
                top.bias = Some(parse_bias(stmt)?);
            }
            ".end" => {
                if open.is_some() {
                    return Err(syntax(head, ".end inside .subckt"));
                }
                ended = true;
            }
            _ => return Err(syntax(head, format!("unknown directive '{}'", head.text))),
        }
    }
    if let Some((def, _)) = open {
        return Err(ParseError::SyntaxError {
            line: def.line,
            col: 1,
            message: format!(".subckt {} is never closed", def.name),
        });
    }
    resolve(&top)?;
    Ok(top)
}

/// Model references and instance arity, once every definition is known.
fn resolve(top: &Netlist) -> Result<(), ParseError> {
    let scopes = std::iter::once(&top.devices).chain(top.subcircuits.iter().map(|s| &s.body.devices));
    for devices in scopes {
        for d in devices {
            match d.kind {
                DeviceKind::Mosfet | DeviceKind::Diode => {
                    let name = d.model.as_deref().unwrap_or_default();
                    let card = top.model(name).ok_or_else(|| ParseError::UnknownModel {
                        id: d.id.clone(),
                        model: name.to_string(),
                        line: d.line,
                    })?;
                    let fits = match d.kind {
                        DeviceKind::Mosfet => card.kind != ModelKind::Diode,
                        _ => card.kind == ModelKind::Diode,
                    };
                    if !fits {
                        return Err(ParseError::UnknownModel {
                            id: d.id.clone(),
                            model: name.to_string(),
                            line: d.line,
                        });
                    }
                }
                DeviceKind::SubcktInstance => {
                    if let Some(def) = d.model.as_deref().and_then(|m| top.subckt(m)) {
                        if def.pins.len() != d.pins.len() {
                            return Err(arity(&d.id, d.line, def.pins.len(), d.pins.len()));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::emit;
    use proptest::prelude::*;

    #[test]
    fn resistor_line() {
        let n = parse("R1 vout 0 1k").unwrap();
        let r = &n.devices[0];
        assert_eq!(r.kind, DeviceKind::R);
        assert_eq!(r.pins, ["vout", "0"]);
        assert_eq!(r.value(), 1000.0);
    }

    #[test]
    fn mosfet_pin_order() {
        let n = parse("M1 vout vin 0 0 nmos W=10u L=1u").unwrap();
        let m = &n.devices[0];
        assert_eq!(m.kind, DeviceKind::Mosfet);
        assert_eq!(m.pins, ["vout", "vin", "0", "0"]);
        assert_eq!(m.param("w"), Some(10e-6));
        assert_eq!(m.param("l"), Some(1e-6));
        assert_eq!(m.model.as_deref(), Some("nmos"));
    }

    #[test]
    fn duplicate_identifier_at_top_level() {
        let err = parse("M1 a b 0 0 nmos\nM1 c d 0 0 nmos\n").unwrap_err();
        assert_eq!(
            err,
            ParseError::DuplicateIdentifier {
                id: "M1".into(),
                line: 2,
                scope: "top".into()
            }
        );
        assert_eq!(err.signature(), "duplicate-identifier:M1");
    }

    #[test]
    fn same_id_in_different_scopes_is_fine() {
        let src = ".subckt inv a y vdd\nM1 y a 0 0 nmos\nM2 y a vdd vdd pmos\n.ends\nM1 q p 0 0 nmos\nX1 p q vdd inv\n";
        assert!(parse(src).is_ok());
    }

    #[test]
    fn arity_and_model_errors() {
        assert!(matches!(
            parse("M1 d g s nmos W=1u"),
            Err(ParseError::ArityMismatch { expected: 4, found: 3, .. })
        ));
        assert!(matches!(parse("R1 a 1k"), Err(ParseError::ArityMismatch { .. })));
        assert!(matches!(
            parse("M1 d g s b fancy"),
            Err(ParseError::UnknownModel { .. })
        ));
        assert!(matches!(
            parse(".subckt s a b\nR1 a b 1\n.ends\nX1 n1 s\n"),
            Err(ParseError::ArityMismatch { expected: 2, found: 1, .. })
        ));
    }

    #[test]
    fn syntax_error_position() {
        match parse("R1 a 0 1k\nQ1 c b e npn\n") {
            Err(ParseError::SyntaxError { line, col, .. }) => assert_eq!((line, col), (2, 1)),
            other => panic!("{other:?}"),
        }
        match parse("R1 a 0 zz\n") {
            Err(ParseError::SyntaxError { line, col, .. }) => assert_eq!((line, col), (1, 8)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sources_and_directives() {
        let src = "\
* test deck
V1 in 0 DC 1 AC 1
+ SIN(0 0.5 1k)
V2 clk 0 PULSE(0 5 0 1n 1n 1u 2u)
I1 0 n 1m
C1 n 0 1u ic=0.5
.model mn nmos (vto=0.7 kp=100u lambda=0.02)
.model mp pmos vto=-0.8 kp=50u
.op
.dc V1 0 5 0.1
.ac dec 10 1 1meg
.tran 1u 1m uic
.ic V(n)=0.1 V(in)=0
.bias V1 0 5 51
.end
";
        let n = parse(src).unwrap();
        let v1 = n.device("v1").unwrap();
        assert_eq!(v1.param("ac_mag"), Some(1.0));
        assert_eq!(v1.param("sin_freq"), Some(1000.0));
        assert_eq!(v1.param("sin_td"), Some(0.0));
        assert_eq!(n.device("V2").unwrap().param("pulse_per"), Some(2e-6));
        assert_eq!(n.device("C1").unwrap().param("ic"), Some(0.5));
        assert_eq!(n.models["mp"].vth, 0.8);
        assert_eq!(n.analyses.len(), 4);
        assert_eq!(n.initial_conditions["n"], 0.1);
        assert_eq!(n.bias.as_ref().unwrap().points, 51);
        let again = parse(&emit(&n)).unwrap();
        assert_eq!(again, n);
    }

    const CORPUS: &[&str] = &[
        "R1 vout 0 1k",
        "V1 vdd 0 5\nR1 vdd mid 1k\nR2 mid 0 1k\n.op\n",
        "M1 vout vin 0 0 nmos W=10u L=1u\nR1 vdd vout 10k\nVdd vdd 0 5\nVin vin 0 DC 1 AC 1\n.ac dec 10 10 1meg\n",
        ".subckt opamp inp inn out vdd\nM1 out inp 0 0 nmos\nR1 vdd out 1k\n.ends opamp\nX1 a b c vdd opamp\n",
        "C1 a 0 1n ic=1\nL1 a b 1m\nD1 b 0\n.tran 1n 1u\n",
    ];

    #[test]
    fn corpus_emit_parse_idempotent() {
        for src in CORPUS {
            let once = emit(&parse(src).unwrap());
            let twice = emit(&parse(&once).unwrap());
            assert_eq!(once, twice, "{src}");
            assert_eq!(parse(&once).unwrap(), parse(src).unwrap());
        }
    }

    fn token() -> impl Strategy<Value = String> {
        prop_oneof![
            "[RCLVIMDXrcvx][0-9]{1,2}",
            "[a-z]{1,4}",
            "[0-9]{1,3}(k|meg|m|u|n|p)?",
            Just("(".to_string()),
            Just(")".to_string()),
            Just("=".to_string()),
            Just(".subckt".to_string()),
            Just(".ends".to_string()),
            Just(".model".to_string()),
            Just(".dc".to_string()),
            Just(".ac".to_string()),
            Just(".ic".to_string()),
            Just("+".to_string()),
            Just("*".to_string()),
            Just("nmos".to_string()),
            Just("SIN".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn parser_is_total(lines in prop::collection::vec(prop::collection::vec(token(), 0..8), 0..8)) {
            let src: String = lines.iter().map(|l| l.join(" ") + "\n").collect();
            if let Ok(n) = parse(&src) {
                let once = emit(&n);
                let reparsed = parse(&once).expect("emitted text parses");
                prop_assert_eq!(&reparsed, &n);
                prop_assert_eq!(emit(&reparsed), once);
            }
        }

        #[test]
        fn parser_total_on_arbitrary_text(src in "\\PC{0,200}") {
            let _ = parse(&src);
        }
    }
}
