//! Closed-loop analog circuit synthesis engine.
//!
//! A candidate netlist is generated from a prompt, verified by an embedded
//! SPICE-subset simulator against structural rules and functional
//! assertions, and the failures are distilled into a persistent rule
//! playbook that conditions the next generation.
//!
//! Module map:
//! - [`model`]: task instances, assertions, execution outcomes, the PASS verdict.
//! - [`netlist`]: SPICE-subset parser/emitter, structural checker, parameter patches.
//! - [`sim`]: modified nodal analysis (operating point, DC sweep, transient, AC).
//! - [`verify`]: the five-stage check pipeline, bias repair, diagnosis.
//! - [`memory`]: the rule playbook store (update, retrieval, persistence).
//! - [`agents`]: prompt assembly and text-generation backends.
//! - [`tune`]: TPE parameter search over a feasible candidate.
//! - [`orchestrate`]: the iterative generate/execute/diagnose/refine loop and benchmarks.
//! - [`evalkit`]: Pass@k, CSR(k), and report tables.

pub mod agents;
pub mod evalkit;
pub mod memory;
pub mod model;
pub mod netlist;
pub mod orchestrate;
pub mod sim;
pub mod tune;
pub mod verify;

pub(crate) mod util;
