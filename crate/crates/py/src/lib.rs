// Copyright 2026 The Ephemera Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Python bindings: histograms, the three mechanisms, the aggregation core,
//! the query gate and the experiment commands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use ephemera::aggcore::{decode_key, encode_key, AggCoreConfig, Payload};
use ephemera::config::{parse_variants, ExperimentConfig};
use ephemera::dp::{self, MechanismConfig};
use ephemera::eval::{self, SyntheticCorpusConfig};
use ephemera::experiment::{self, Options};
use ephemera::histogram::IndexedHistogram;
use ephemera::model::{HistIndex, ScaleTable, Schema};
use ephemera::query::parse_for_device_stream;
use ephemera::rng::CounterRng;

type Key = (u32, u32, u32, u32);

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn schema_of(dims: (u32, u32, u32)) -> PyResult<Schema> {
    Schema::new(dims.0, dims.1, dims.2).map_err(value_error)
}

/// Sparse histogram over (activity, metric, region, direction).
#[pyclass(name = "Histogram", module = "ephemera_py", from_py_object)]
#[derive(Clone)]
pub struct PyHistogram {
    inner: IndexedHistogram,
}

#[pymethods]
impl PyHistogram {
    #[new]
    fn new(num_activities: u32, num_metrics: u32, num_regions: u32) -> PyResult<Self> {
        Ok(PyHistogram { inner: IndexedHistogram::new(schema_of((num_activities, num_metrics, num_regions))?) })
    }

    /// (num_activities, num_metrics, num_regions)
    #[getter]
    fn schema(&self) -> (u32, u32, u32) {
        let s = self.inner.schema();
        (s.num_activities, s.num_metrics, s.num_regions)
    }

    fn set(&mut self, index: Key, value: f64) -> PyResult<()> {
        self.inner.set(HistIndex::new(index.0, index.1, index.2, index.3), value).map_err(value_error)
    }

    fn get(&self, index: Key) -> f64 {
        self.inner.get(&HistIndex::new(index.0, index.1, index.2, index.3))
    }

    /// Entries in canonical index order.
    fn items(&self) -> Vec<(Key, f64)> {
        self.inner.iter().map(|(i, v)| ((i.activity, i.metric, i.region, i.direction), *v)).collect()
    }

    fn l1_norm(&self) -> f64 {
        self.inner.l1_norm()
    }

    fn clip(&self, bound: f64) -> PyResult<PyHistogram> {
        Ok(PyHistogram { inner: self.inner.clip(bound).map_err(value_error)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &PyHistogram) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (a, m, r) = self.schema();
        format!("Histogram(schema=({a}, {m}, {r}), entries={})", self.inner.len())
    }
}

/// A configured DP mechanism.
#[pyclass(name = "Mechanism", module = "ephemera_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyMechanism {
    inner: MechanismConfig,
}

#[pymethods]
impl PyMechanism {
    #[staticmethod]
    fn joint_clipping(epsilon: f64, clip: f64) -> Self {
        PyMechanism { inner: MechanismConfig::joint_clipping(epsilon, clip) }
    }

    /// `clips` has one bound per (activity, metric) slice, activity-major.
    #[staticmethod]
    fn budget_split(epsilon: f64, clips: Vec<f64>) -> Self {
        PyMechanism { inner: MechanismConfig::budget_split(epsilon, clips) }
    }

    #[staticmethod]
    fn activity_metric_scaling(epsilon: f64, clip: f64, scales: Vec<f64>, schema: (u32, u32, u32)) -> PyResult<Self> {
        let table = ScaleTable::new(schema_of(schema)?, scales).map_err(value_error)?;
        Ok(PyMechanism { inner: MechanismConfig::activity_metric_scaling(epsilon, clip, table) })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[setter]
    fn set_tau(&mut self, tau: f64) {
        self.inner.tau = tau;
    }

    /// Bounds one device histogram as the client would before upload.
    fn bound(&self, device: &PyHistogram) -> PyResult<PyHistogram> {
        Ok(PyHistogram { inner: self.inner.bound_contribution(&device.inner).map_err(value_error)? })
    }

    /// Bounds, sums, noises and thresholds; returns (release, suppressed).
    fn run(&self, py: Python<'_>, devices: Vec<PyHistogram>, window_id: &str, seed: u64) -> PyResult<(PyHistogram, usize)> {
        let Some(first) = devices.first() else {
            return Err(PyValueError::new_err("no device histograms"));
        };
        let schema = *first.inner.schema();
        let hs: Vec<IndexedHistogram> = devices.into_iter().map(|d| d.inner).collect();
        let rel = py
            .detach(|| dp::run_mechanism(&self.inner, schema, &hs, window_id, seed))
            .map_err(value_error)?;
        Ok((PyHistogram { inner: rel.histogram }, rel.suppressed))
    }

    fn __repr__(&self) -> String {
        format!("Mechanism({}, epsilon={}, clip={})", self.inner.variant.name(), self.inner.epsilon, self.inner.clip)
    }
}

/// Exact grouped-sum core. Rows are (key fields, values).
#[pyclass(name = "AggregationCore", module = "ephemera_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyAggregationCore {
    inner: ephemera::aggcore::AggregationCore,
}

#[pymethods]
impl PyAggregationCore {
    #[new]
    fn new(key_columns: Vec<String>, value_columns: Vec<String>, min_contributions: u64) -> PyResult<Self> {
        let cfg = AggCoreConfig { key_columns, value_columns, min_contributions };
        Ok(PyAggregationCore { inner: ephemera::aggcore::AggregationCore::init(cfg).map_err(value_error)? })
    }

    /// Adds one device's update.
    fn accumulate(&mut self, rows: Vec<(Vec<String>, Vec<f64>)>) -> PyResult<()> {
        let payload = Payload::new(rows.into_iter().map(|(k, v)| (encode_key(&k), v)).collect());
        self.inner.accumulate(&payload).map_err(value_error)
    }

    /// A new core holding both inputs.
    fn merge(&self, other: &PyAggregationCore) -> PyResult<PyAggregationCore> {
        Ok(PyAggregationCore { inner: self.inner.clone().merge(other.inner.clone()).map_err(value_error)? })
    }

    #[getter]
    fn contribution_count(&self) -> u64 {
        self.inner.contribution_count()
    }

    fn serialize_state<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.serialize_state())
    }

    /// (key fields, sums) in canonical key order; raises if the
    /// contribution threshold is not met.
    fn report(&self) -> PyResult<Vec<(Vec<String>, Vec<f64>)>> {
        let sums = self.inner.clone().report().map_err(value_error)?;
        Ok(sums.rows().into_iter().map(|(k, v)| (decode_key(&k), v)).collect())
    }
}

/// Parses and validates a query; returns the plan text or raises
/// ValueError listing every diagnostic.
#[pyfunction]
fn validate_query(text: &str) -> PyResult<String> {
    parse_for_device_stream(text).map(|q| q.to_string()).map_err(value_error)
}

/// Error classes of a query; empty when it is accepted.
#[pyfunction]
fn query_error_classes(text: &str) -> Vec<&'static str> {
    match parse_for_device_stream(text) {
        Ok(_) => Vec::new(),
        Err(d) => d.classes(),
    }
}

#[pyfunction]
fn laplace_inverse_cdf(u: f64, b: f64) -> f64 {
    dp::laplace_inverse_cdf(u, b)
}

/// `n` Laplace(0, b) draws from a seeded stream.
#[pyfunction]
fn sample_laplace(b: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let mut rng = CounterRng::new(seed, "python").stream(0);
    (0..n).map(|_| dp::sample_laplace(b, &mut rng).map_err(value_error)).collect()
}

#[pyfunction]
fn evaluation_floor(num_devices: usize) -> u64 {
    eval::evaluation_floor(num_devices)
}

/// First week of the default synthetic corpus: (device histograms, exact
/// truth, per-partition device counts).
#[pyfunction]
#[pyo3(signature = (num_devices, num_regions, seed=0))]
#[allow(clippy::type_complexity)]
fn synthetic_window(
    py: Python<'_>,
    num_devices: usize,
    num_regions: u32,
    seed: u64,
) -> PyResult<(Vec<PyHistogram>, PyHistogram, BTreeMap<(u32, u32, u32), u64>)> {
    let cfg = SyntheticCorpusConfig { num_devices, num_regions, seed, ..Default::default() };
    let (devices, truth) = py
        .detach(|| {
            let corpus = eval::generate_corpus(&cfg)?;
            let w = &cfg.windows()[0];
            Ok::<_, String>((eval::window_histograms(cfg.schema(), &corpus, w), eval::exact_workload(cfg.schema(), &corpus, w)))
        })
        .map_err(PyValueError::new_err)?;
    Ok((
        devices.into_iter().map(|inner| PyHistogram { inner }).collect(),
        PyHistogram { inner: truth.histogram },
        truth.device_counts,
    ))
}

/// Per-metric weighted relative error; None where no partition qualifies.
#[pyfunction]
fn weighted_relative_error(
    truth: &PyHistogram,
    estimate: &PyHistogram,
    device_counts: BTreeMap<(u32, u32, u32), u64>,
    floor: u64,
) -> Vec<Option<f64>> {
    eval::weighted_relative_error(&truth.inner, &estimate.inner, &device_counts, floor)
}

fn load_config(config: PathBuf, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&config).map_err(value_error)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Same as `ephemera run`.
#[pyfunction]
#[pyo3(signature = (config, out, seed=None, jobs=1))]
fn run_experiment(py: Python<'_>, config: PathBuf, out: PathBuf, seed: Option<u64>, jobs: usize) -> PyResult<()> {
    let cfg = load_config(config, seed)?;
    py.detach(|| experiment::cmd_run(&cfg, &out, &Options { jobs, variants: None }))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Same as `ephemera sweep`.
#[pyfunction]
#[pyo3(signature = (config, out, seed=None, jobs=1, variants=None))]
fn run_sweep(
    py: Python<'_>,
    config: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    jobs: usize,
    variants: Option<Vec<String>>,
) -> PyResult<()> {
    let cfg = load_config(config, seed)?;
    let variants = variants.map(|v| parse_variants(&v)).transpose().map_err(value_error)?;
    py.detach(|| experiment::cmd_sweep(&cfg, &out, &Options { jobs, variants }))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn ephemera_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHistogram>()?;
    m.add_class::<PyMechanism>()?;
    m.add_class::<PyAggregationCore>()?;
    m.add_function(wrap_pyfunction!(validate_query, m)?)?;
    m.add_function(wrap_pyfunction!(query_error_classes, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_inverse_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(sample_laplace, m)?)?;
    m.add_function(wrap_pyfunction!(evaluation_floor, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_window, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_relative_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
