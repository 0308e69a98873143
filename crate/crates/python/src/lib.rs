use std::path::PathBuf;

use kgtransfer::fixtures::{generate_with, ScenarioConfig};
use kgtransfer::pipeline::{load_config, run as run_pipeline, Command};
use kgtransfer::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Parse { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Writes the synthetic transfer scenario to `out` and returns its audit.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, entities = 100, alignment_fraction = 1.0, planted_confidence = 0.9))]
fn generate_scenario<'py>(
    py: Python<'py>,
    out: PathBuf,
    seed: u64,
    entities: usize,
    alignment_fraction: f64,
    planted_confidence: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let scenario = generate_with(&ScenarioConfig {
        n_entities: entities,
        alignment_fraction,
        planted_confidence,
        seed,
        ..Default::default()
    })
    .map_err(to_py)?;
    scenario.save(&out).map_err(to_py)?;
    let a = &scenario.audit;
    let d = PyDict::new(py);
    d.set_item("background_triplets", scenario.background.triplets().len())?;
    d.set_item("train", scenario.split.train.len())?;
    d.set_item("valid", scenario.split.valid.len())?;
    d.set_item("test", scenario.split.test.len())?;
    d.set_item("derivable", a.derivable.len())?;
    d.set_item("derivable_fraction", a.derivable_fraction())?;
    d.set_item("leaked", a.leaked)?;
    Ok(d)
}

/// Returns the configuration issues as `path: message` strings (empty when valid).
#[pyfunction]
fn validate_config(path: PathBuf) -> Vec<String> {
    match load_config(&path) {
        Ok(_) => Vec::new(),
        Err(issues) => issues.iter().map(ToString::to_string).collect(),
    }
}

/// Runs a pipeline command; returns the artifact directory, the log lines
/// and, for commands that evaluate, the metrics.
#[pyfunction]
#[pyo3(signature = (config, command = "all", seed = None))]
fn run<'py>(py: Python<'py>, config: PathBuf, command: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = load_config(&config).map_err(|issues| {
        let lines: Vec<String> = issues.iter().map(ToString::to_string).collect();
        PyValueError::new_err(lines.join("\n"))
    })?;
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    let command = Command::parse(command).map_err(to_py)?;
    let (outcome, logs) = py.allow_threads(|| {
        let mut logs = Vec::new();
        let outcome = run_pipeline(&cfg, command, &mut |r| logs.push(r.to_line()));
        (outcome, logs)
    });
    let outcome = outcome.map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dir", outcome.dir)?;
    d.set_item("log", logs)?;
    d.set_item("report", outcome.report)?;
    if let Some(m) = outcome.metrics {
        let md = PyDict::new(py);
        md.set_item("setting", m.setting.as_str())?;
        md.set_item("queries", m.queries)?;
        md.set_item("mrr", m.mrr)?;
        md.set_item("hits1", m.hits1)?;
        md.set_item("hits10", m.hits10)?;
        md.set_item("ranks", m.ranks)?;
        d.set_item("metrics", md)?;
    }
    Ok(d)
}

#[pymodule]
fn kgtransfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
