//! Python bindings. Results cross the boundary as JSON strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use splitmachine::attestation::boot_pcr;
use splitmachine::crypto::Digest;
use splitmachine::harness::{self, Bounds, Counterexample};
use splitmachine::mailbox::{Mutant, Tick};
use splitmachine::manifest::MachineManifest;
use splitmachine::platform::Faults;
use splitmachine::scenarios::{self, RunOptions, ScenarioRun, BUILTIN, DEFAULT_MAX_TICKS};
use splitmachine::tcb::tcb_report;
use splitmachine::trace::{read_jsonl, write_jsonl};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn execute(scenario: &str, seed: u64, max_ticks: Tick, inject: Vec<String>) -> PyResult<ScenarioRun> {
    let spec = scenarios::load(scenario).map_err(err)?;
    let mut faults = Faults::default();
    for f in &inject {
        faults.apply(f).map_err(err)?;
    }
    let opts = RunOptions { manifest: None, faults, max_ticks, seed };
    Ok(scenarios::run(&spec, &opts))
}

/// Names of the built-in scenarios.
#[pyfunction]
fn builtin_scenarios() -> Vec<&'static str> {
    BUILTIN.to_vec()
}

/// Runs a scenario and returns its result as JSON.
#[pyfunction]
#[pyo3(signature = (scenario, seed=0, max_ticks=DEFAULT_MAX_TICKS, inject=Vec::new()))]
fn run_scenario(scenario: &str, seed: u64, max_ticks: Tick, inject: Vec<String>) -> PyResult<String> {
    let run = execute(scenario, seed, max_ticks, inject)?;
    serde_json::to_string(&run.result).map_err(err)
}

/// Runs a scenario and returns its trace as JSON lines.
#[pyfunction]
#[pyo3(signature = (scenario, seed=0, max_ticks=DEFAULT_MAX_TICKS, inject=Vec::new()))]
fn scenario_trace(scenario: &str, seed: u64, max_ticks: Tick, inject: Vec<String>) -> PyResult<String> {
    let run = execute(scenario, seed, max_ticks, inject)?;
    let mut out = Vec::new();
    write_jsonl(&run.trace, &mut out).map_err(err)?;
    String::from_utf8(out).map_err(err)
}

/// Explores the shipped mailbox, or a named mutant, and returns the report.
#[pyfunction]
#[pyo3(signature = (bounds="default", mutant=None))]
fn check(bounds: &str, mutant: Option<&str>) -> PyResult<String> {
    let b = Bounds::preset(bounds).ok_or_else(|| err(format!("unknown bounds {bounds:?}")))?;
    let m = match mutant {
        None => None,
        Some(name) => Some(
            Mutant::ALL
                .into_iter()
                .find(|m| serde_json::to_value(m).ok().and_then(|v| v.as_str().map(|s| s == name)).unwrap_or(false))
                .ok_or_else(|| err(format!("unknown mutant {name:?}")))?,
        ),
    };
    let report = harness::explore_mutant(&b, m).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

/// Mutant names accepted by `check`.
#[pyfunction]
fn mutants() -> Vec<String> {
    Mutant::ALL
        .iter()
        .filter_map(|m| serde_json::to_value(m).ok().and_then(|v| v.as_str().map(String::from)))
        .collect()
}

/// Replays a counterexample given as JSON; true if the violation reproduces.
#[pyfunction]
fn replay(counterexample: &str) -> PyResult<bool> {
    let cex = Counterexample::from_json(counterexample).map_err(err)?;
    Ok(harness::replay(&cex) == harness::ReplayOutcome::Confirmed)
}

/// TCB report for a JSON-lines trace.
#[pyfunction]
#[pyo3(signature = (trace, medical=false))]
fn tcb(trace: &str, medical: bool) -> PyResult<String> {
    let events = read_jsonl(trace.as_bytes()).map_err(err)?;
    let manifest = if medical { MachineManifest::with_medical_devices() } else { MachineManifest::default_machine() };
    serde_json::to_string(&tcb_report(&events, &manifest)).map_err(err)
}

/// Post-boot PCR for an image digest, both hex.
#[pyfunction]
fn expected_pcr(image_digest: &str) -> PyResult<String> {
    let bytes: [u8; 32] = hex::decode(image_digest)
        .map_err(err)?
        .try_into()
        .map_err(|_| err("digest must be 32 bytes"))?;
    Ok(boot_pcr(&Digest(bytes)).to_hex())
}

#[pymodule]
fn splitmachine_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(builtin_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_trace, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(mutants, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(tcb, m)?)?;
    m.add_function(wrap_pyfunction!(expected_pcr, m)?)?;
    Ok(())
}
