//! Python bindings: phantom generation, anonymization, image metrics, query
//! validation and simulation scenarios.

use mammogrid::analysis::{self, Image};
use mammogrid::dataset;
use mammogrid::metastore::MetaStore;
use mammogrid::querylang;
use mammogrid::simnet::phantom::{generate_phantom, PhantomIdentity, PhantomSpec};
use mammogrid::simnet::scenario::{self, Scenario};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn key32(key: &[u8]) -> PyResult<[u8; 32]> {
    key.try_into().map_err(|_| PyValueError::new_err("federation key must be 32 bytes"))
}

/// Synthetic MGD file. Returns `(bytes, ground_truth)` where the ground truth
/// holds `dense_fraction` and `spots` as (row, col) pairs.
#[pyfunction]
#[pyo3(signature = (seed, rows=256, cols=256, bits=8, spots=0, dense_fraction=0.3))]
fn phantom<'py>(
    py: Python<'py>,
    seed: u64,
    rows: usize,
    cols: usize,
    bits: u8,
    spots: usize,
    dense_fraction: f64,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyDict>)> {
    let spec = PhantomSpec { rows, cols, bits, spots, dense_fraction, seed, ..PhantomSpec::default() };
    let (bytes, truth) = generate_phantom(&spec, &PhantomIdentity::synthetic(seed)).map_err(value_err)?;
    let gt = PyDict::new(py);
    gt.set_item("dense_fraction", truth.dense_fraction)?;
    gt.set_item("spots", truth.spots)?;
    Ok((PyBytes::new(py, &bytes), gt))
}

/// Strips direct identifiers. Returns `(anonymized_bytes, pseudonym)`.
#[pyfunction]
fn anonymize<'py>(py: Python<'py>, mgd: &[u8], key: &[u8]) -> PyResult<(Bound<'py, PyBytes>, String)> {
    let ds = dataset::decode(mgd).map_err(value_err)?;
    let (anon, pair) = dataset::anonymize(&ds, &key32(key)?).map_err(value_err)?;
    let bytes = dataset::encode(&anon).map_err(value_err)?;
    Ok((PyBytes::new(py, &bytes), pair.pseudonym))
}

#[pyfunction]
fn pseudonym(key: &[u8], patient_id: &str) -> PyResult<String> {
    Ok(dataset::pseudonym(&key32(key)?, patient_id))
}

/// Image metrics for an MGD file.
#[pyfunction]
fn analyze<'py>(py: Python<'py>, mgd: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let ds = dataset::decode(mgd).map_err(value_err)?;
    let img = Image::from_dataset(&ds).map_err(value_err)?;
    let (report, det) = analysis::qc_report(&img);
    let out = PyDict::new(py);
    out.set_item("mean_brightness", report.mean_brightness)?;
    out.set_item("rms_contrast", report.rms_contrast)?;
    out.set_item("breast_density", report.breast_density)?;
    out.set_item("microcalc_count", report.microcalc_count)?;
    out.set_item("centroids", det.centroids)?;
    out.set_item("warning", report.warning)?;
    Ok(out)
}

/// Canonical text of a query checked against the built-in attributes.
#[pyfunction]
fn normalize_query(text: &str) -> PyResult<String> {
    let tq = querylang::parse_and_validate(text, &MetaStore::with_builtins()).map_err(value_err)?;
    Ok(tq.query().to_string())
}

/// Runs a scenario given as JSON and returns the report as JSON.
#[pyfunction]
fn run_scenario(py: Python<'_>, scenario_json: &str) -> PyResult<String> {
    let sc: Scenario = serde_json::from_str(scenario_json).map_err(value_err)?;
    let report = py.detach(|| scenario::run(&sc)).map_err(value_err)?.1;
    serde_json::to_string(&report).map_err(value_err)
}

#[pymodule]
pub fn pymammogrid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(anonymize, m)?)?;
    m.add_function(wrap_pyfunction!(pseudonym, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_query, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
