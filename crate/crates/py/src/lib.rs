//! Python bindings.
//!
//! Masks are exposed as a `Mask` class; everything else (prompt sets,
//! strategy specs, metric records, run summaries) crosses the boundary as
//! plain JSON-shaped Python objects, so no numpy dependency is needed.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use promptbench_core::experiment::{
    aggregate, read_records, render_table as render, run_experiment as run, AggregationMode, Backend,
    ExperimentConfig, Layout, ResultTable, RunOptions, TableFormat,
};
use promptbench_core::io;
use promptbench_core::metrics::{self, DEFAULT_TAU_MM};
use promptbench_core::phantom::{self, PhantomParams};
use promptbench_core::sampling::{build_strategy_prompts, PromptSet, StrategySpec};
use promptbench_core::segmenter::{self, OracleParams};
use promptbench_core::stats;
use promptbench_core::subregion;
use promptbench_core::volume::{Grid, Mask};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn grid(dims: [usize; 3], spacing: Option<[f64; 3]>) -> PyResult<Grid> {
    Grid::new(dims, spacing.unwrap_or([1.0; 3]), [0.0; 3]).map_err(value_err)
}

/// Binary 3D mask in x-fastest order: `index = x + nx * (y + ny * z)`.
#[pyclass(name = "Mask", module = "promptbench", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyMask {
    inner: Mask,
}

impl PyMask {
    pub fn inner(&self) -> &Mask {
        &self.inner
    }
}

impl From<Mask> for PyMask {
    fn from(inner: Mask) -> Self {
        PyMask { inner }
    }
}

#[pymethods]
impl PyMask {
    #[new]
    #[pyo3(signature = (dims, data, spacing = None))]
    fn new(dims: [usize; 3], data: Vec<u8>, spacing: Option<[f64; 3]>) -> PyResult<Self> {
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(value_err(format!("voxel {i} has non-binary value {}", data[i])));
        }
        let data = data.into_iter().map(|v| v == 1).collect();
        Ok(Mask::new(grid(dims, spacing)?, data).map_err(value_err)?.into())
    }

    #[staticmethod]
    #[pyo3(signature = (dims, voxels, spacing = None))]
    fn from_voxels(dims: [usize; 3], voxels: Vec<[usize; 3]>, spacing: Option<[f64; 3]>) -> PyResult<Self> {
        if let Some(v) = voxels.iter().find(|v| (0..3).any(|a| v[a] >= dims[a])) {
            return Err(value_err(format!("voxel {v:?} is outside dims {dims:?}")));
        }
        Ok(Mask::from_voxels(grid(dims, spacing)?, voxels).into())
    }

    /// Loads a binary `.nii` or `.raw` mask.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_mask(&path)
            .map(Into::into)
            .map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_mask(&self.inner, &path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn voxels(&self) -> Vec<[usize; 3]> {
        self.inner.voxels()
    }

    fn to_list(&self) -> Vec<u8> {
        self.inner.data().iter().map(|&b| u8::from(b)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.grid().len()
    }

    fn __eq__(&self, other: &Bound<'_, PyAny>) -> bool {
        other.cast::<PyMask>().is_ok_and(|o| o.get().inner == self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Mask(dims={:?}, count={})", self.inner.dims(), self.inner.count())
    }
}

/// Splits a mask into `{"boundary", "margin", "center"}` sub-region masks.
#[pyfunction]
fn decompose<'py>(py: Python<'py>, mask: &PyMask) -> PyResult<Bound<'py, PyAny>> {
    let s = subregion::decompose(&mask.inner);
    let out = pyo3::types::PyDict::new(py);
    out.set_item("boundary", PyMask::from(s.boundary))?;
    out.set_item("margin", PyMask::from(s.margin))?;
    out.set_item("center", PyMask::from(s.center))?;
    Ok(out.into_any())
}

/// Draws the prompt set of one run. `spec` is a strategy dict such as
/// `{"kind": "region-constrained", "region": "C", "count": 5}`.
#[pyfunction]
#[pyo3(signature = (gt, spec, seed, fixed_seed = 0))]
fn sample<'py>(py: Python<'py>, gt: &PyMask, spec: &Bound<'py, PyAny>, seed: u64, fixed_seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let spec: StrategySpec = from_py(spec)?;
    let prompts = build_strategy_prompts(&spec, &subregion::decompose(&gt.inner), fixed_seed, seed).map_err(value_err)?;
    to_py(py, &prompts)
}

/// Segments with the deterministic synthetic oracle.
#[pyfunction]
#[pyo3(signature = (gt, prompts, r_base = 2.0, alpha = 1.0, r_neg = 0.0))]
fn synthetic_segment(gt: &PyMask, prompts: &Bound<'_, PyAny>, r_base: f64, alpha: f64, r_neg: f64) -> PyResult<PyMask> {
    let prompts: PromptSet = from_py(prompts)?;
    let params = OracleParams { r_base, alpha, r_neg };
    segmenter::synthetic_segment(&gt.inner, &prompts, params)
        .map(Into::into)
        .map_err(value_err)
}

#[pyfunction]
fn dice(pred: &PyMask, gt: &PyMask) -> PyResult<f64> {
    metrics::dice(&pred.inner, &gt.inner).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, tau_mm = DEFAULT_TAU_MM))]
fn nsd(pred: &PyMask, gt: &PyMask, tau_mm: f64) -> PyResult<f64> {
    metrics::nsd(&pred.inner, &gt.inner, tau_mm).map_err(value_err)
}

/// Two-tailed paired t-test; returns `{"t", "p", "df", "degenerate"}`.
#[pyfunction]
fn paired_ttest<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &stats::paired_ttest(&a, &b).map_err(value_err)?)
}

#[pyfunction]
fn format_mean_std(mean: f64, std: f64) -> String {
    promptbench_core::experiment::format_mean_std(mean, std)
}

/// Deterministic blob phantom on a cubic grid.
#[pyfunction]
#[pyo3(signature = (seed, size = 32))]
fn phantom_mask(seed: u64, size: usize) -> PyResult<PyMask> {
    if size < 8 {
        return Err(value_err("size must be at least 8"));
    }
    let params = PhantomParams { dims: [size; 3], ..PhantomParams::default() };
    Ok(phantom::blob(seed, &params).into())
}

/// Runs (or resumes) the grid described by a JSON config file and returns a
/// summary dict. The interpreter lock is released while cells run.
#[pyfunction]
#[pyo3(signature = (config_path, workers = 0, retry_failed = false))]
fn run_experiment<'py>(py: Python<'py>, config_path: PathBuf, workers: usize, retry_failed: bool) -> PyResult<Bound<'py, PyAny>> {
    let config = ExperimentConfig::from_file(&config_path).map_err(value_err)?;
    let options = RunOptions { workers, retry_failed };
    let outcome = py.detach(|| run(&config, &options)).map_err(value_err)?;
    let summary = serde_json::json!({
        "output_dir": config.output_dir,
        "records": outcome.table.records.len(),
        "computed": outcome.computed,
        "reused": outcome.reused,
        "failed_cells": outcome.table.failed_cells,
        "tables": outcome.tables,
        "warnings": outcome.warnings,
    });
    to_py(py, &summary)
}

/// Renders a table from a `results.jsonl` file.
#[pyfunction]
#[pyo3(signature = (results_path, layout = "summary", format = "markdown", aggregation = "per-run"))]
fn render_table(results_path: PathBuf, layout: &str, format: &str, aggregation: &str) -> PyResult<String> {
    let layout: Layout = layout.parse().map_err(value_err)?;
    let format: TableFormat = format.parse().map_err(value_err)?;
    let mode: AggregationMode =
        serde_json::from_value(serde_json::Value::from(aggregation)).map_err(|_| value_err(format!("unknown aggregation '{aggregation}'")))?;
    let records = read_records(&results_path).map_err(value_err)?;
    let mut table = ResultTable::from_records_only(records, Backend::SyntheticOracle(OracleParams::default()), DEFAULT_TAU_MM);
    if mode != AggregationMode::PerRun {
        table.aggregates = aggregate(&table.records, mode);
    }
    Ok(render(&table, layout, format).text)
}

#[pymodule]
fn promptbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_segment, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(nsd, m)?)?;
    m.add_function(wrap_pyfunction!(paired_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(format_mean_std, m)?)?;
    m.add_function(wrap_pyfunction!(phantom_mask, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(render_table, m)?)?;
    Ok(())
}

/// Builds the module in an embedded interpreter; used by the Rust tests.
pub fn make_module(py: Python<'_>) -> PyResult<Bound<'_, PyModule>> {
    let m = PyModule::new(py, "promptbench")?;
    promptbench(&m)?;
    Ok(m)
}
