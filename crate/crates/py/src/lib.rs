// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python module `kedit`: the pipeline commands, configuration hashing and
//! the token-level metrics.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use kedit::cli::{self, CommandOutput, Experiment, RunConfig};
use kedit::evalharness;
use kedit::Error;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Config(_) | Error::Format(_) => PyValueError::new_err(msg),
        Error::MissingArtifact(_) | Error::NoRuns(_) | Error::Io { .. } => PyFileNotFoundError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn load(config: Option<PathBuf>, overrides: Vec<String>, out: Option<PathBuf>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::load(config.as_deref(), &overrides).map_err(to_py)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn output(out: CommandOutput) -> (String, PathBuf) {
    (out.summary, out.manifest_path)
}

/// Runs one pipeline stage and returns `(summary, manifest_path)`.
///
/// `command` is one of `genbench`, `pretrain`, `edit`, `eval`, `sweep`.
/// `experiment` selects a single sweep experiment; all run when omitted.
#[pyfunction]
#[pyo3(signature = (command, config=None, overrides=Vec::new(), out=None, experiment=None))]
fn run(
    py: Python<'_>,
    command: &str,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    out: Option<PathBuf>,
    experiment: Option<&str>,
) -> PyResult<(String, PathBuf)> {
    let cfg = load(config, overrides, out)?;
    let experiments = match experiment {
        None => Experiment::ALL.to_vec(),
        Some(name) => vec![Experiment::parse(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown experiment {name:?}")))?],
    };
    let result = py.allow_threads(|| match command {
        "genbench" => Some(cli::cmd_genbench(&cfg)),
        "pretrain" => Some(cli::cmd_pretrain(&cfg)),
        "edit" => Some(cli::cmd_edit(&cfg)),
        "eval" => Some(cli::cmd_eval(&cfg)),
        "sweep" => Some(cli::cmd_sweep(&cfg, &experiments)),
        _ => None,
    });
    match result {
        Some(r) => r.map(output).map_err(to_py),
        None => Err(PyValueError::new_err(format!(
            "unknown command {command:?}; expected genbench, pretrain, edit, eval or sweep"
        ))),
    }
}

/// Summarizes every edit run in `run_dir`; returns `(summary, manifest_path)`.
#[pyfunction]
fn report(py: Python<'_>, run_dir: PathBuf) -> PyResult<(String, PathBuf)> {
    py.allow_threads(|| cli::cmd_report(Path::new(&run_dir))).map(output).map_err(to_py)
}

/// Canonical TOML of the resolved configuration.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new()))]
fn resolve_config(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<String> {
    load(config, overrides, None)?.to_toml().map_err(to_py)
}

/// The 12-digit configuration hash used in artifact names.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new()))]
fn config_hash(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<String> {
    load(config, overrides, None)?.hash().map_err(to_py)
}

/// Smoothed sentence BLEU-4 on token ids, in [0, 100].
#[pyfunction]
fn bleu(hypothesis: Vec<usize>, reference: Vec<usize>) -> f64 {
    evalharness::bleu(&hypothesis, &reference)
}

/// ROUGE-L F1 on token ids, in [0, 100].
#[pyfunction]
fn rouge_l(hypothesis: Vec<usize>, reference: Vec<usize>) -> f64 {
    evalharness::rouge_l(&hypothesis, &reference)
}

#[pymodule]
#[pyo3(name = "kedit")]
fn kedit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    Ok(())
}
