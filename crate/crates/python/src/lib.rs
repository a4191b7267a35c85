//! Python bindings for the federated fine-tuning engine.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use fedtune::aggregation;
use fedtune::data::{builtin_federation, Split};
use fedtune::experiment::{cmd_report, cmd_run, ExperimentConfig};
use fedtune::federation::{self, LinkModel};
use fedtune::heads::{HeadConfig, HeadKind};
use fedtune::metrics;
use fedtune::model::{Model as CoreModel, ModelSpec};
use fedtune::wire::{deserialize_params, serialize_params};
use fedtune::{Error, Tensor};

create_exception!(fedtune_py, FedtuneError, PyException);
create_exception!(fedtune_py, ConfigError, FedtuneError);
create_exception!(fedtune_py, DivergenceError, FedtuneError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Invalid(_) => ConfigError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::NonFinite(_) => DivergenceError::new_err(e.to_string()),
        Error::Io { .. } => pyo3::exceptions::PyIOError::new_err(e.to_string()),
        _ => FedtuneError::new_err(e.to_string()),
    }
}

fn head_kind(name: &str) -> PyResult<HeadKind> {
    name.parse().map_err(to_py)
}

/// Trainable parameter count of a head on 384-channel features.
#[pyfunction]
fn head_param_count(kind: &str) -> PyResult<usize> {
    Ok(HeadConfig::new(head_kind(kind)?).param_count())
}

#[pyfunction]
#[pyo3(signature = (num_blocks, rank = 8, embed_dim = 384))]
fn lora_param_count(num_blocks: usize, rank: usize, embed_dim: usize) -> usize {
    fedtune::lora::lora_param_count(num_blocks, rank, embed_dim)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, n_boot = 10_000, level = 0.95, seed = 0))]
fn bootstrap_ci(scores: Vec<f64>, labels: Vec<u8>, n_boot: usize, level: f64, seed: u64) -> PyResult<(f64, f64)> {
    metrics::bootstrap_ci(&scores, &labels, n_boot, level, seed).map_err(to_py)
}

#[pyfunction]
fn simple_avg_weights(n: usize) -> PyResult<Vec<f64>> {
    aggregation::simple_avg_weights(n).map_err(to_py)
}

#[pyfunction]
fn fedavg_weights(sizes: Vec<usize>) -> PyResult<Vec<f64>> {
    aggregation::fedavg_weights(&sizes).map_err(to_py)
}

/// Returns `(weights, grad, data)`.
#[pyfunction]
fn fedce_weights(
    updates: Vec<Vec<f64>>,
    loo_val_errors: Vec<f64>,
    prev: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let r = aggregation::fedce_weights(&updates, &loo_val_errors, &prev).map_err(to_py)?;
    Ok((r.weights, r.grad, r.data))
}

#[pyfunction]
fn rate_my_lora_weights(prev_metric: Vec<f64>, cur_metric: Vec<f64>) -> PyResult<Vec<f64>> {
    aggregation::rate_my_lora_weights(&prev_metric, &cur_metric).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (num_bytes, bandwidth_bytes_per_s = 12.5e6, rtt_s = 0.05))]
fn simulate_latency(num_bytes: usize, bandwidth_bytes_per_s: f64, rtt_s: f64) -> PyResult<f64> {
    federation::simulate_latency(
        num_bytes,
        &LinkModel {
            bandwidth_bytes_per_s,
            rtt_s,
        },
    )
    .map_err(to_py)
}

/// `{client: (train, val, test)}` sample counts of the builtin registry.
#[pyfunction]
fn builtin_cohorts(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    let d = PyDict::new(py);
    for c in builtin_federation() {
        let t = |s: Split| c.counts(s).total();
        d.set_item(&c.name, (t(Split::Train), t(Split::Val), t(Split::Test)))?;
    }
    Ok(d)
}

/// A classification head on frozen 384×8×8×8 features.
#[pyclass(module = "fedtune_py")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (head = "convs", seed = 0))]
    fn new(head: &str, seed: u64) -> PyResult<Self> {
        let spec = ModelSpec::features(HeadConfig::new(head_kind(head)?));
        Ok(Self {
            inner: CoreModel::build(&spec, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn trainable_params(&self) -> usize {
        self.inner.extract_trainable().trainable_numel()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    /// Logits `[N][classes]` for a flat row-major batch of `N` feature maps.
    fn logits(&self, features: Vec<f32>, batch: usize) -> PyResult<Vec<Vec<f64>>> {
        let mut shape = vec![batch];
        shape.extend(self.inner.spec.sample_shape());
        let x = Tensor::from_vec(&shape, features).map_err(to_py)?;
        let y = self.inner.logits(&x).map_err(to_py)?;
        let c = self.inner.spec.head.num_classes;
        Ok(y.to_f64_vec().chunks(c).map(<[f64]>::to_vec).collect())
    }

    /// Trainable tensors in the wire format.
    fn serialize<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = serialize_params(&self.inner.extract_trainable()).map_err(to_py)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn load(&mut self, data: &[u8]) -> PyResult<()> {
        let p = deserialize_params(data).map_err(to_py)?;
        self.inner.load_trainable(&p).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(head={:?}, trainable_params={})",
            self.inner.spec.head.kind.label(),
            self.trainable_params()
        )
    }
}

/// Runs every sweep point of a TOML config; returns `{run: {scope: (auc, lo, hi)}}`.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str, out_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(to_py)?;
    let runs = py.detach(|| cmd_run(&cfg, &out_dir)).map_err(to_py)?;
    let out = PyDict::new(py);
    for run in runs {
        let d = PyDict::new(py);
        for r in &run.results {
            d.set_item(&r.scope, (r.auc, r.ci_low, r.ci_high))?;
        }
        out.set_item(&run.name, d)?;
    }
    Ok(out)
}

/// Writes summary tables for the runs under `dir`; returns the summary CSV.
#[pyfunction]
fn report(dir: PathBuf) -> PyResult<String> {
    Ok(cmd_report(&dir).map_err(to_py)?.summary_csv())
}

#[pyfunction]
fn validate_config(config_toml: &str) -> PyResult<()> {
    ExperimentConfig::from_toml(config_toml).map(|_| ()).map_err(|e| match e {
        Error::Config(m) => PyValueError::new_err(m),
        other => to_py(other),
    })
}

#[pymodule]
fn fedtune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FedtuneError", m.py().get_type::<FedtuneError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(head_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(lora_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(simple_avg_weights, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_weights, m)?)?;
    m.add_function(wrap_pyfunction!(fedce_weights, m)?)?;
    m.add_function(wrap_pyfunction!(rate_my_lora_weights, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_latency, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_cohorts, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    Ok(())
}
