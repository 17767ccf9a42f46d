//! Python bindings for the federated contribution simulator.
//!
//! The module mirrors the `fedsim` CLI: run experiments from presets or TOML
//! text, re-run the Shapley estimator over a persisted run directory, and
//! call the Shapley estimators directly on a Python utility function.
//! Records and reports cross the boundary as plain dicts and lists.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use pyo3::IntoPyObjectExt;

use fedsim_core::contribution::{self, CharacteristicFn};
use fedsim_core::runner::config::{compose_config, compose_config_text, ShapleyMode};
use fedsim_core::scenario::PRESETS;
use fedsim_core::{runner, Error as CoreError};

/// Config and input mistakes become `ValueError`; failures inside a run
/// (numeric blowups, I/O, serialization) become `RuntimeError`.
fn to_py_err(e: CoreError) -> PyErr {
    let msg = e.to_string();
    match e {
        CoreError::Config(_)
        | CoreError::Domain(_)
        | CoreError::Data(_)
        | CoreError::Scenario(_)
        | CoreError::Structural(_)
        | CoreError::Budget(_) => PyValueError::new_err(msg),
        CoreError::Numeric(_) | CoreError::Io(_) | CoreError::Serialization(_) => {
            PyRuntimeError::new_err(msg)
        }
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                // serde_json numbers are i64, u64, or finite f64; as_f64
                // cannot fail on the remaining arm
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, val) in map {
                dict.set_item(key, json_to_py(py, val)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Render an overrides dict as `path=value` strings for the config composer.
/// Bools must be checked before ints: Python bools are ints.
fn overrides_to_sets(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<String>> {
    let mut sets = Vec::new();
    let Some(dict) = overrides else { return Ok(sets) };
    for (key, value) in dict.iter() {
        let key: String = key
            .extract()
            .map_err(|_| PyTypeError::new_err("override keys must be dotted-path strings"))?;
        let rendered = if let Ok(b) = value.cast::<PyBool>() {
            b.is_true().to_string()
        } else if let Ok(i) = value.extract::<i64>() {
            i.to_string()
        } else if let Ok(f) = value.extract::<f64>() {
            format!("{f:?}")
        } else if let Ok(s) = value.extract::<String>() {
            s
        } else {
            return Err(PyTypeError::new_err(format!(
                "override {key:?} must be a str, int, float, or bool"
            )));
        };
        sets.push(format!("{key}={rendered}"));
    }
    Ok(sets)
}

fn parse_mode(mode: &str) -> PyResult<ShapleyMode> {
    match mode {
        "exact" => Ok(ShapleyMode::Exact),
        "mc" => Ok(ShapleyMode::Mc),
        other => Err(PyValueError::new_err(format!(
            "unknown shapley mode {other:?}; use \"exact\" or \"mc\""
        ))),
    }
}

/// Either an agent count (ids 0..n) or an explicit id list.
fn parse_agents(agents: &Bound<'_, PyAny>) -> PyResult<Vec<usize>> {
    if agents.cast::<PyBool>().is_err() {
        if let Ok(n) = agents.extract::<usize>() {
            return Ok((0..n).collect());
        }
    }
    agents
        .extract::<Vec<usize>>()
        .map_err(|_| PyTypeError::new_err("agents must be an int count or a list of agent ids"))
}

/// Wrap a Python callable as a memoized subset utility. The callable gets a
/// sorted, deduplicated list of agent ids and must return a finite number.
fn callable_game(values: Py<PyAny>) -> CharacteristicFn {
    CharacteristicFn::new(move |subset: &[usize]| {
        Python::attach(|py| {
            let result = values
                .call1(py, (subset.to_vec(),))
                .map_err(|e| CoreError::Data(format!("utility callable raised: {e}")))?;
            result
                .bind(py)
                .extract::<f64>()
                .map_err(|e| CoreError::Data(format!("utility callable must return a number: {e}")))
        })
    })
}

/// Run one federated experiment and return its record as nested dicts.
///
/// `config` is a TOML document (text, not a path); `preset` picks a named
/// scenario and replaces any scenario in `config`; `overrides` maps dotted
/// config paths to values, applied last. With `output_dir` the run also
/// writes its artifact directory and the returned dict gains a `run_dir`
/// key; without it nothing touches the filesystem and `run_dir` is None.
#[pyfunction]
#[pyo3(signature = (config=None, preset=None, overrides=None, output_dir=None))]
fn run_experiment(
    py: Python<'_>,
    config: Option<&str>,
    preset: Option<&str>,
    overrides: Option<&Bound<'_, PyDict>>,
    output_dir: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let sets = overrides_to_sets(overrides)?;
    let cfg = match config {
        Some(text) => compose_config_text(text, preset, &sets),
        None => compose_config(None, preset, &sets),
    }
    .map_err(to_py_err)?;
    let resolved = cfg.resolve().map_err(to_py_err)?;
    let (output, dir) = match output_dir {
        Some(base) => {
            let (output, dir) =
                runner::run_and_persist(&resolved, Path::new(base)).map_err(to_py_err)?;
            (output, Some(dir))
        }
        None => (runner::run_experiment(&resolved).map_err(to_py_err)?, None),
    };
    let record = json_to_py(py, &serde_json::to_value(&output.record).map_err(json_err)?)?;
    let dict = record.bind(py).cast::<PyDict>().map_err(PyErr::from)?;
    dict.set_item("run_dir", dir.map(|d| d.display().to_string()))?;
    Ok(record)
}

/// Compute a Shapley report for a persisted run directory and return it as a
/// dict. Also rewrites `shapley.json` and the record in place, exactly like
/// the CLI `shapley` verb. `mode` is "exact" or "mc".
#[pyfunction]
#[pyo3(signature = (run_dir, mode="mc", iterations=500, seed=0))]
fn run_shapley(
    py: Python<'_>,
    run_dir: &str,
    mode: &str,
    iterations: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let report = runner::run_shapley_on_dir(Path::new(run_dir), parse_mode(mode)?, iterations, seed)
        .map_err(to_py_err)?;
    json_to_py(py, &serde_json::to_value(&report).map_err(json_err)?)
}

/// Exact Shapley values of a Python utility function, by subset enumeration.
/// `agents` is a count or an id list; cohorts above twelve agents are
/// refused (use `shapley_mc`).
#[pyfunction(name = "shapley_exact")]
fn shapley_exact_py(values: Py<PyAny>, agents: &Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
    let ids = parse_agents(agents)?;
    let chi = callable_game(values);
    contribution::shapley_exact(&chi, &ids).map_err(to_py_err)
}

/// Monte-Carlo Shapley estimate of a Python utility function, sampling
/// `iterations` permutations from a stream seeded by `seed`.
#[pyfunction(name = "shapley_mc")]
#[pyo3(signature = (values, agents, iterations=500, seed=0))]
fn shapley_mc_py(
    values: Py<PyAny>,
    agents: &Bound<'_, PyAny>,
    iterations: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let ids = parse_agents(agents)?;
    let chi = callable_game(values);
    contribution::shapley_mc(&chi, &ids, iterations, &mut contribution::shapley_stream(seed))
        .map_err(to_py_err)
}

/// Normalize raw impact scores into contribution shares: min-max to [0, 1],
/// then softmax. All-equal inputs give the uniform split.
#[pyfunction]
fn contributions(impacts: Vec<f64>) -> PyResult<Vec<f64>> {
    if impacts.is_empty() {
        return Err(PyValueError::new_err("impacts must be non-empty"));
    }
    if impacts.iter().any(|v| !v.is_finite()) {
        return Err(PyValueError::new_err("impacts must all be finite"));
    }
    Ok(contribution::normalize_shares(&impacts))
}

/// The built-in scenario presets as (name, description) pairs.
#[pyfunction]
fn list_presets() -> Vec<(String, String)> {
    PRESETS.iter().map(|(name, desc)| (name.to_string(), desc.to_string())).collect()
}

#[pymodule]
fn fedsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_shapley, m)?)?;
    m.add_function(wrap_pyfunction!(shapley_exact_py, m)?)?;
    m.add_function(wrap_pyfunction!(shapley_mc_py, m)?)?;
    m.add_function(wrap_pyfunction!(contributions, m)?)?;
    m.add_function(wrap_pyfunction!(list_presets, m)?)?;
    Ok(())
}
