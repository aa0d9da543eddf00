//! Python bindings for `dsmlab`.
//!
//! Structured results cross the boundary as plain Python containers (dicts,
//! lists, floats) built from the same JSON the command-line tool writes, so
//! field names match the on-disk artifacts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

use dsmlab::bounds::{self, BoundInputs, BoundKind};
use dsmlab::experiment::{self, ExperimentConfig, ExperimentError};
use dsmlab::spectral::decompose;
use dsmlab::timing::{self, CompletionSchedule, ComputeMode, TimeDistribution};
use dsmlab::topology::{self, ConsensusMatrix, GraphKind};
use dsmlab::DMatrix;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_error(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn experiment_error(e: ExperimentError) -> PyErr {
    if e.is_config() {
        value_error(e)
    } else {
        runtime_error(e)
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_error)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Accepts either a JSON string or any object `json.dumps` understands.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if obj.is_instance_of::<PyString>() {
        obj.extract()?
    } else {
        obj.py()
            .import("json")?
            .call_method1("dumps", (obj,))?
            .extract()?
    };
    serde_json::from_str(&text).map_err(value_error)
}

/// Bound inputs given directly or nested under `bound_inputs` in a stats dict.
fn bound_inputs(obj: &Bound<'_, PyAny>) -> PyResult<BoundInputs> {
    let value: serde_json::Value = from_py(obj)?;
    let inner = value.get("bound_inputs").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(value_error)
}

/// Parameters of a generated topology.
#[pyclass(name = "GraphSpec", module = "dsmlab_py", from_py_object)]
#[derive(Clone)]
struct PyGraphSpec {
    inner: topology::GraphSpec,
}

#[pymethods]
impl PyGraphSpec {
    #[new]
    #[pyo3(signature = (kind, m, d = 0, seed = 0, candidates = topology::DEFAULT_CANDIDATES))]
    fn new(kind: &str, m: usize, d: usize, seed: u64, candidates: usize) -> PyResult<Self> {
        let kind: GraphKind = serde_json::from_value(serde_json::Value::String(kind.to_string()))
            .map_err(|_| value_error(format!("unknown graph kind '{kind}'")))?;
        let inner = topology::GraphSpec {
            kind,
            m,
            d,
            seed,
            candidates,
        };
        inner.check().map_err(value_error)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(obj: &Bound<'_, PyAny>) -> PyResult<Self> {
        let inner: topology::GraphSpec = from_py(obj)?;
        inner.check().map_err(value_error)?;
        Ok(Self { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.label()
    }

    #[getter(M)]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn label(&self) -> String {
        self.inner.label()
    }

    fn to_json(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn generate(&self) -> PyResult<Topology> {
        let matrix = topology::generate(&self.inner).map_err(runtime_error)?;
        Ok(Topology { matrix })
    }

    fn __repr__(&self) -> String {
        format!("GraphSpec({})", self.inner.label())
    }
}

/// A validated consensus matrix.
#[pyclass(module = "dsmlab_py")]
struct Topology {
    matrix: ConsensusMatrix,
}

#[pymethods]
impl Topology {
    /// Builds a topology from a dense row-major matrix.
    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(value_error("matrix must be square"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let matrix = ConsensusMatrix::from_dense(DMatrix::from_row_slice(m, m, &flat))
            .map_err(value_error)?;
        Ok(Self { matrix })
    }

    #[getter(M)]
    fn m(&self) -> usize {
        self.matrix.m()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        let a = self.matrix.matrix();
        a.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    fn validate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &topology::validate(&self.matrix))
    }

    /// Moduli, multiplicities, gap and related spectral quantities.
    fn spectral(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let dec = decompose(&self.matrix).map_err(runtime_error)?;
        to_py(py, &dec.summary())
    }

    /// Simulates synchronized completion times for `k` iterations.
    ///
    /// `distribution` uses the config format, for example
    /// `{"kind": "pareto", "shape": 2.0, "scale": 1.0, "cap": 100.0}`.
    #[pyo3(signature = (distribution, k, seed = 0, comm_delay = 0.0, fixed = false))]
    fn simulate_time(
        &self,
        distribution: &Bound<'_, PyAny>,
        k: usize,
        seed: u64,
        comm_delay: f64,
        fixed: bool,
    ) -> PyResult<Schedule> {
        let dist: TimeDistribution = from_py(distribution)?;
        let sampler = dist.sampler().map_err(value_error)?;
        let mode = if fixed {
            ComputeMode::FixedPerNode
        } else {
            ComputeMode::IidPerIteration
        };
        let inner = timing::simulate_schedule(&self.matrix, &sampler, k, comm_delay, &mode, seed)
            .map_err(runtime_error)?;
        Ok(Schedule { inner })
    }
}

/// Completion times `t[j][k]` from a timing simulation.
#[pyclass(module = "dsmlab_py")]
struct Schedule {
    inner: CompletionSchedule,
}

#[pymethods]
impl Schedule {
    #[getter(M)]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter(K)]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn completion_max(&self, k: usize) -> PyResult<f64> {
        self.check(k)?;
        Ok(self.inner.completion_max(k))
    }

    fn completion_min(&self, k: usize) -> PyResult<f64> {
        self.check(k)?;
        Ok(self.inner.completion_min(k))
    }

    fn mean_iteration_duration(&self) -> f64 {
        self.inner.mean_iteration_duration()
    }

    /// `(time, iterations completed)` steps.
    fn throughput(&self) -> Vec<(f64, f64)> {
        timing::throughput_curve(&self.inner)
    }

    /// Per-iteration rows as written to `schedule.csv`.
    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows()
    }
}

impl Schedule {
    fn check(&self, k: usize) -> PyResult<()> {
        if k > self.inner.k() {
            return Err(value_error(format!(
                "iteration {k} beyond the simulated {}",
                self.inner.k()
            )));
        }
        Ok(())
    }
}

/// A parsed experiment configuration.
#[pyclass(module = "dsmlab_py")]
struct Experiment {
    config: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    /// Accepts a dict, a JSON string, or (with `path=True`) a file path.
    #[new]
    #[pyo3(signature = (config, path = false))]
    fn new(config: &Bound<'_, PyAny>, path: bool) -> PyResult<Self> {
        let config = if path {
            let p: PathBuf = config.extract()?;
            experiment::load_config(&p).map_err(experiment_error)?
        } else {
            let value: serde_json::Value = from_py(config)?;
            ExperimentConfig::from_value(value).map_err(value_error)?
        };
        config.validate().map_err(value_error)?;
        Ok(Self { config })
    }

    fn to_json(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.config)
    }

    #[getter]
    fn outputs(&self) -> PathBuf {
        self.config.outputs.clone()
    }

    #[setter]
    fn set_outputs(&mut self, dir: PathBuf) {
        self.config.outputs = dir;
    }

    /// Trains the first planned run; returns `{label, eta, initial_loss, metrics}`.
    fn train(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let cfg = self.config.clone();
        let (prepared, eta, log) = py
            .detach(move || experiment::train_single(&cfg))
            .map_err(experiment_error)?;
        to_py(
            py,
            &serde_json::json!({
                "label": prepared.label,
                "eta": eta,
                "initial_loss": log.initial_loss,
                "metrics": log.records,
            }),
        )
    }

    /// Gradient statistics and bound inputs at the initial models.
    #[pyo3(signature = (samples = None))]
    fn estimate(&self, py: Python<'_>, samples: Option<usize>) -> PyResult<Py<PyAny>> {
        let mut cfg = self.config.clone();
        if let Some(n) = samples {
            cfg.estimation.samples = n;
        }
        let stats = py
            .detach(move || experiment::estimate_single(&cfg))
            .map_err(experiment_error)?;
        to_py(py, &stats)
    }

    /// Compares the closed-form permutation estimates with sampled permutations.
    #[pyo3(signature = (perms = 10_000, seed = 0))]
    fn oracle(&self, py: Python<'_>, perms: usize, seed: u64) -> PyResult<Py<PyAny>> {
        let cfg = self.config.clone();
        let report = py
            .detach(move || {
                experiment::with_worker_pool(|| experiment::oracle_single(&cfg, perms, seed))
            })
            .map_err(experiment_error)?;
        to_py(py, &report)
    }

    /// Runs the full sweep and returns the path of `index.json`.
    fn run(&self, py: Python<'_>) -> PyResult<PathBuf> {
        let cfg = self.config.clone();
        let summary = py
            .detach(move || experiment::run_experiment(&cfg))
            .map_err(experiment_error)?;
        Ok(summary.outputs.join("index.json"))
    }
}

/// Summarizes an artifact directory written by `Experiment.run`.
#[pyfunction]
fn report(py: Python<'_>, dir: PathBuf) -> PyResult<Py<PyAny>> {
    let rep = experiment::report(&dir).map_err(experiment_error)?;
    to_py(py, &rep)
}

/// Evaluates a bound at each `K` in `ks`; returns `(K, value)` pairs.
#[pyfunction]
fn bound_curve(kind: &str, inputs: &Bound<'_, PyAny>, ks: Vec<u64>) -> PyResult<Vec<(u64, f64)>> {
    let kind: BoundKind = kind.parse().map_err(value_error)?;
    let inp = bound_inputs(inputs)?;
    let curve = bounds::curve(kind, &inp, &ks).map_err(value_error)?;
    Ok(curve.values)
}

/// Predicts the first iteration where `ring` departs from the clique loss curve.
#[pyfunction]
#[pyo3(signature = (kind, ring, clique, clique_loss, pct = 0.04))]
fn predict_divergence(
    py: Python<'_>,
    kind: &str,
    ring: &Bound<'_, PyAny>,
    clique: &Bound<'_, PyAny>,
    clique_loss: Vec<f64>,
    pct: f64,
) -> PyResult<Py<PyAny>> {
    let kind: BoundKind = kind.parse().map_err(value_error)?;
    let outcome = bounds::divergence_predictor(
        kind,
        &bound_inputs(ring)?,
        &bound_inputs(clique)?,
        &clique_loss,
        pct,
    )
    .map_err(value_error)?;
    to_py(py, &outcome)
}

#[pymodule]
fn dsmlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGraphSpec>()?;
    m.add_class::<Topology>()?;
    m.add_class::<Schedule>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(bound_curve, m)?)?;
    m.add_function(wrap_pyfunction!(predict_divergence, m)?)?;
    Ok(())
}
