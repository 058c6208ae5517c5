use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{is_ground, DeviceKind, DeviceLine, ModelKind, Netlist};
use crate::model::{ConstraintSet, NamingRule};

/// Registered structural rules, in reporting order.
pub const RULE_CATALOG: &[&str] = &[
    "unique-ids",
    "required-node",
    "nmos-bulk-tie",
    "pmos-bulk-tie",
    "subckt-undefined",
    "subckt-pins",
    "dc-path-to-reference",
    "required-analysis",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralViolation {
    pub rule_id: String,
    /// Source line of the offending statement (0 when the rule concerns
    /// something missing from the whole netlist).
    pub location: usize,
    pub message: String,
    pub severity: Severity,
    /// Device, node, subcircuit or analysis the rule fired on.
    pub subject: String,
}

impl StructuralViolation {
    fn new(rule_id: &str, location: usize, subject: impl Into<String>, message: String) -> Self {
        debug_assert!(RULE_CATALOG.contains(&rule_id));
        StructuralViolation {
            rule_id: rule_id.to_string(),
            location,
            message,
            severity: Severity::Error,
            subject: subject.into(),
        }
    }

    /// Normalized failure key, free of line numbers and values.
    pub fn signature(&self) -> String {
        let class = match self.rule_id.as_str() {
            "unique-ids" => "duplicate-identifier",
            other => other,
        };
        format!("{class}:{}", self.subject)
    }
}

fn same(a: &str, b: &str) -> bool {
    a.eq_ignore_ascii_case(b)
}

fn check_scope(
    n: &Netlist,
    scope_devices: &[DeviceLine],
    omega: &ConstraintSet,
    out: &mut Vec<StructuralViolation>,
) {
    let mut seen = BTreeSet::new();
    for d in scope_devices {
        if !seen.insert(d.id.to_ascii_lowercase()) {
            out.push(StructuralViolation::new(
                "unique-ids",
                d.line,
                d.id.clone(),
                format!("instance identifier {} is used more than once in its scope", d.id),
            ));
        }
    }
    for d in scope_devices {
        match d.kind {
            DeviceKind::Mosfet => {
                let Some(card) = d.model.as_deref().and_then(|m| n.model(m)) else {
                    continue;
                };
                let (src, body) = (&d.pins[2], &d.pins[3]);
                let nmos_ok = same(body, src) || (is_ground(body) && is_ground(src));
                if card.kind == ModelKind::Nmos1
                    && omega.naming_rules.contains(&NamingRule::NmosBulkTie)
                    && !nmos_ok
                {
                    out.push(StructuralViolation::new(
                        "nmos-bulk-tie",
                        d.line,
                        d.id.clone(),
                        format!("NMOS {} bulk is tied to {body}, its source is {src}; NMOS bulk must tie to source", d.id),
                    ));
                }
                if card.kind == ModelKind::Pmos1
                    && omega.naming_rules.contains(&NamingRule::PmosBulkTie)
                    && !same(body, &omega.supply_node)
                {
                    out.push(StructuralViolation::new(
                        "pmos-bulk-tie",
                        d.line,
                        d.id.clone(),
                        format!("PMOS {} bulk is tied to {body}; PMOS bulk must tie to {}", d.id, omega.supply_node),
                    ));
                }
            }
            DeviceKind::SubcktInstance => {
                let name = d.model.as_deref().unwrap_or_default();
                if n.subckt(name).is_none() {
                    out.push(StructuralViolation::new(
                        "subckt-undefined",
                        d.line,
                        name,
                        format!("{} instantiates subcircuit {name}, which is not defined", d.id),
                    ));
                }
            }
            _ => {}
        }
    }
}

/// Run every registered rule. An empty result means the netlist satisfies
/// the structural part of Ω.
pub fn check_structure(n: &Netlist, omega: &ConstraintSet) -> Vec<StructuralViolation> {
    let mut out = Vec::new();
    check_scope(n, &n.devices, omega, &mut out);
    for s in &n.subcircuits {
        check_scope(n, &s.body.devices, omega, &mut out);
    }

    let top_nodes: BTreeSet<String> = n.nodes().iter().map(|s| s.to_ascii_lowercase()).collect();
    for name in &omega.required_node_names {
        if !top_nodes.contains(&name.to_ascii_lowercase()) {
            out.push(StructuralViolation::new(
                "required-node",
                0,
                name.clone(),
                format!("required node {name} does not appear in the netlist; outputs must be named exactly"),
            ));
        }
    }

    for (name, pins) in &omega.required_subcircuit_pins {
        match n.subckt(name) {
            None => out.push(StructuralViolation::new(
                "subckt-pins",
                0,
                name.clone(),
                format!("required subcircuit {name}({}) is not defined", pins.join(" ")),
            )),
            Some(def) => {
                let matches = def.pins.len() == pins.len()
                    && def.pins.iter().zip(pins).all(|(a, b)| same(a, b));
                if !matches {
                    out.push(StructuralViolation::new(
                        "subckt-pins",
                        def.line,
                        name.clone(),
                        format!(
                            "subcircuit {name} pins are ({}), required ({})",
                            def.pins.join(" "),
                            pins.join(" ")
                        ),
                    ));
                }
            }
        }
    }

    dc_path(n, &mut out);

    for kind in &omega.simulator_settings {
        if !n.has_analysis(*kind) {
            out.push(StructuralViolation::new(
                "required-analysis",
                0,
                kind.directive(),
                format!("analysis {} is required but missing", kind.directive()),
            ));
        }
    }
    out
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Nodes with no conductive path to ground in the flattened netlist.
/// Capacitors and current sources are open at DC; R, L, V, diodes and MOSFET
/// drain-source channels conduct.
pub(crate) fn floating_nodes(n: &Netlist) -> Vec<(String, usize)> {
    let (flat, _) = n.flatten();
    // Index 0 is ground.
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut first: Vec<(String, usize)> = vec![("0".into(), 0)];
    let mut id_of = |name: &str, line: usize, first: &mut Vec<(String, usize)>| -> usize {
        if is_ground(name) {
            return 0;
        }
        let key = name.to_ascii_lowercase();
        *index.entry(key).or_insert_with(|| {
            first.push((name.to_string(), line));
            first.len() - 1
        })
    };
    // Pins of unresolved instances still count as nodes.
    for d in &n.devices {
        for p in &d.pins {
            id_of(p, d.line, &mut first);
        }
    }
    let mut edges = Vec::new();
    for d in &flat.devices {
        let ids: Vec<usize> = d.pins.iter().map(|p| id_of(p, d.line, &mut first)).collect();
        match d.kind {
            DeviceKind::R | DeviceKind::L | DeviceKind::V | DeviceKind::Diode => {
                edges.push((ids[0], ids[1]))
            }
            DeviceKind::Mosfet => edges.push((ids[0], ids[2])),
            _ => {}
        }
    }
    let mut uf = UnionFind {
        parent: (0..first.len()).collect(),
    };
    for (a, b) in edges {
        uf.union(a, b);
    }
    let mut out: Vec<(String, usize)> = (1..first.len())
        .filter(|&i| uf.find(i) != 0)
        .map(|i| first[i].clone())
        .collect();
    out.sort_by(|a, b| a.0.to_ascii_lowercase().cmp(&b.0.to_ascii_lowercase()));
    out
}

fn dc_path(n: &Netlist, out: &mut Vec<StructuralViolation>) {
    for (node, line) in floating_nodes(n) {
        out.push(StructuralViolation::new(
            "dc-path-to-reference",
            line,
            node.clone(),
            format!("node {node} has no DC path to ground; every node needs a DC path to a reference for operating-point convergence"),
        ));
    }
}
