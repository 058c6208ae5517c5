//! Python module `analogloop`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use analog_loop::agents::BackendSpec;
use analog_loop::evalkit;
use analog_loop::memory::{self, MemoryConfig, MemoryStore};
use analog_loop::model::{parse_task_file, TaskInstance};
use analog_loop::netlist;
use analog_loop::orchestrate::{self, ClockMode, LoopConfig, Workspace};
use analog_loop::sim;
use analog_loop::verify::{evaluate, DesignCandidate};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn task_from(text: &str) -> PyResult<TaskInstance> {
    parse_task_file(text).map_err(value_err)
}

/// 1 - C(n-c, k) / C(n, k).
#[pyfunction]
fn pass_at_k(n: u64, c: u64, k: u64) -> PyResult<f64> {
    evalkit::pass_at_k(n, c, k).map_err(value_err)
}

/// DC operating point: node name -> volts.
#[pyfunction]
fn operating_point(netlist_text: &str) -> PyResult<Vec<(String, f64)>> {
    let n = netlist::parse(netlist_text).map_err(value_err)?;
    let op = sim::operating_point(&n).map_err(runtime_err)?;
    Ok(op.node_voltages.into_iter().collect())
}

/// Run the check pipeline on one netlist against a task document.
#[pyfunction]
fn verify<'py>(py: Python<'py>, task_text: &str, netlist_text: &str) -> PyResult<Bound<'py, PyDict>> {
    let task = task_from(task_text)?;
    let (outcome, verdict) = evaluate(&task, &DesignCandidate::new(netlist_text));
    let d = PyDict::new(py);
    d.set_item("pass", verdict.pass)?;
    d.set_item("program_error", outcome.program_error)?;
    d.set_item("simulator_error", outcome.simulator_error)?;
    let diags: Vec<(String, String, String)> = outcome
        .diagnostic_log
        .iter()
        .map(|x| (format!("{:?}", x.stage), x.signature.clone(), x.evidence.clone()))
        .collect();
    d.set_item("diagnostics", diags)?;
    let failed: Vec<String> = verdict.failed_assertions.iter().map(|f| f.label.clone()).collect();
    d.set_item("failed_assertions", failed)?;
    Ok(d)
}

/// Run the loop on one task with a backend spec (`scripted:<file>` or
/// `http:<url>#<model>`). Artifacts go to `workspace` when given.
#[pyfunction]
#[pyo3(signature = (task_text, backend, store_path, workspace=None, k=30, logical_clock=true))]
fn run_task<'py>(
    py: Python<'py>,
    task_text: &str,
    backend: &str,
    store_path: PathBuf,
    workspace: Option<PathBuf>,
    k: u32,
    logical_clock: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let task = task_from(task_text)?;
    let spec = BackendSpec::parse(backend).map_err(value_err)?;
    let store = MemoryStore::open(&store_path, task.constraints.all_conventions(), MemoryConfig::default())
        .map_err(runtime_err)?;
    let ws = workspace.map(|p| Workspace::create(&p)).transpose().map_err(runtime_err)?;
    let cfg = LoopConfig {
        k,
        clock: if logical_clock { ClockMode::Logical } else { ClockMode::Wall },
        ..LoopConfig::default()
    };
    let st = py
        .detach(|| orchestrate::run_task(&task, spec.backend(), &store, &mut Vec::new(), &cfg, ws.as_ref()))
        .map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("success", st.success)?;
    d.set_item("attempts", st.attempts)?;
    d.set_item("first_success_at", st.first_success_at)?;
    d.set_item("tokens", st.cumulative_tokens)?;
    d.set_item("per_attempt", st.per_attempt)?;
    d.set_item("store_version", store.version())?;
    d.set_item("final_netlist", st.final_candidate.map(|c| c.source))?;
    Ok(d)
}

/// Rules a task type would retrieve from a stored playbook.
#[pyfunction]
fn retrieve_rules(store_path: PathBuf, task_type: &str) -> PyResult<Vec<String>> {
    let m = memory::load(&store_path).map_err(runtime_err)?;
    Ok(memory::retrieve(&m, task_type, &MemoryConfig::default())
        .into_iter()
        .map(|e| e.rule)
        .collect())
}

/// The stored playbook as a JSON string.
#[pyfunction]
fn export_store(store_path: PathBuf) -> PyResult<String> {
    let m = memory::load(&store_path).map_err(runtime_err)?;
    serde_json::to_string(&m).map_err(runtime_err)
}

#[pymodule]
fn analogloop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(operating_point, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_task, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve_rules, m)?)?;
    m.add_function(wrap_pyfunction!(export_store, m)?)?;
    Ok(())
}
