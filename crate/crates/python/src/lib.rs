//! Python bindings: environments, the MoE layer, run configuration and
//! training, checkpoint evaluation, and the numeric building blocks of the
//! perturbation and diagnostics.

use std::path::PathBuf;
use std::sync::Arc;

use moerl_core::analysis::{conflict_fraction, efficiency, grad_cosine, GradientRecord};
use moerl_core::autodiff::Tensor;
use moerl_core::dormant::{dormant_report, neuron_scores};
use moerl_core::envs::{self, EnvSpec};
use moerl_core::harness::{self, RunConfig};
use moerl_core::moe::{gate_from_logits, load_balance_loss};
use moerl_core::perturb::{self, ParamLayout, PerturbConfig, WeightVector};
use moerl_core::rlcore::{self, read_checkpoint, read_metrics};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyString};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn err(e: moerl_core::Error) -> PyErr {
    match e {
        moerl_core::Error::Config(_) | moerl_core::Error::Dimension(_) | moerl_core::Error::Contract(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Converts any serializable value into plain Python objects via JSON.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

#[pyclass(name = "Env", module = "moerl")]
struct PyEnv {
    inner: envs::Env,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: &str, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: envs::Env::make(EnvSpec::parse(spec).map_err(err)?, seed) })
    }

    #[getter]
    fn spec(&self) -> String {
        self.inner.spec().to_string()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.spec().action_dim()
    }

    #[getter]
    fn obs_size(&self) -> usize {
        self.inner.spec().obs_shape().numel()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset()
    }

    fn step<'py>(&mut self, py: Python<'py>, action: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.step(&action).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("obs", s.obs)?;
        d.set_item("reward", s.reward)?;
        d.set_item("done", s.done)?;
        d.set_item("terminal", s.terminal)?;
        d.set_item("success", s.info.success)?;
        d.set_item("stage", s.info.stage_index)?;
        d.set_item("task", s.info.task_id)?;
        Ok(d)
    }

    /// Action of the scripted controller that solves the task.
    fn reference_action(&self) -> Vec<f64> {
        self.inner.reference_action()
    }
}

#[pyclass(name = "MoeLayer", module = "moerl")]
struct PyMoeLayer {
    inner: moerl_core::moe::MoeLayer,
}

#[pymethods]
impl PyMoeLayer {
    #[new]
    #[pyo3(signature = (input, hidden, output, num_experts = 4, k = 2, seed = 0))]
    fn new(input: usize, hidden: usize, output: usize, num_experts: usize, k: usize, seed: u64) -> PyResult<Self> {
        let inner = moerl_core::moe::MoeLayer::new(input, hidden, output, num_experts, k, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(err)?;
        Ok(Self { inner })
    }

    fn forward(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&z).map_err(err)
    }

    /// Selected experts, their gate weights and the full router softmax.
    fn route<'py>(&self, py: Python<'py>, z: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.route(&z).map_err(err)?)
    }

    fn param_count(&self) -> usize {
        use moerl_core::autodiff::Module;
        self.inner.param_count()
    }
}

#[pyclass(name = "RunConfig", module = "moerl", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

/// Renders a Python value as the text of a config override.
fn override_text(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.cast::<PyBool>() {
        return Ok(if b.is_true() { "true" } else { "false" }.to_string());
    }
    if let Ok(s) = v.cast::<PyString>() {
        let s = s.to_str()?;
        return serde_json::to_string(s).map_err(|e| PyValueError::new_err(e.to_string()));
    }
    Ok(v.repr()?.to_str()?.to_string())
}

#[pymethods]
impl PyRunConfig {
    /// Layers `config` (a TOML file) and keyword overrides over the preset.
    #[new]
    #[pyo3(signature = (config = None, **overrides))]
    fn new(config: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut pairs = Vec::new();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                pairs.push((k.extract::<String>()?, override_text(&v)?));
            }
        }
        Ok(Self { inner: RunConfig::resolve(config.as_deref(), &pairs).map_err(err)? })
    }

    /// Canonical TOML text; loading it back yields the same config.
    fn echo(&self) -> String {
        self.inner.echo()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(env={:?}, trunk={:?}, seed={})", self.inner.env, self.inner.trunk, self.inner.seed)
    }

    /// Trains into the run directory and returns `(directory, run metadata)`.
    fn train<'py>(&self, py: Python<'py>) -> PyResult<(String, Bound<'py, PyAny>)> {
        let cfg = self.inner.clone();
        let art = py.detach(move || harness::run(&cfg)).map_err(err)?;
        Ok((art.dir.to_string_lossy().into_owned(), to_py(py, &art.meta)?))
    }
}

#[pyclass(name = "Agent", module = "moerl")]
struct PyAgent {
    inner: rlcore::Agent,
    env: String,
}

#[pymethods]
impl PyAgent {
    /// Loads a checkpoint file or the checkpoint inside a run directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let path = if path.is_dir() { path.join(harness::run::CHECKPOINT_FILE) } else { path };
        let ck = read_checkpoint(&path).map_err(err)?;
        Ok(Self { inner: ck.agent, env: ck.arch.env })
    }

    #[getter]
    fn env(&self) -> String {
        self.env.clone()
    }

    /// Deterministic action for one observation.
    fn policy(&self, obs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.policy(&obs).map_err(err)
    }

    #[pyo3(signature = (episodes = 10, seed = 0, env = None, action_repeat = 2))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        episodes: usize,
        seed: u64,
        env: Option<&str>,
        action_repeat: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let spec = EnvSpec::parse(env.unwrap_or(&self.env)).map_err(err)?;
        let res = rlcore::evaluate(&self.inner, &spec, episodes, seed, action_repeat).map_err(err)?;
        to_py(py, &res)
    }
}

/// `clip(1 − rate·β, α_min, α_max)`.
#[pyfunction]
#[pyo3(signature = (beta, alpha_min = 0.2, alpha_max = 0.9, rate = 2.0))]
fn perturb_factor(beta: f64, alpha_min: f64, alpha_max: f64, rate: f64) -> PyResult<f64> {
    let cfg = PerturbConfig { alpha_min, alpha_max, rate, interval_frames: 1 };
    cfg.validate().map_err(err)?;
    Ok(perturb::perturb_factor(beta, &cfg))
}

/// `α·θ + (1 − α)·φ` per coordinate.
#[pyfunction]
fn apply_perturbation(theta: Vec<f64>, phi: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let layout = Arc::new(ParamLayout::from_entries(vec![("w".into(), vec![theta.len()])]));
    let t = WeightVector::new(layout.clone(), theta).map_err(err)?;
    let p = WeightVector::new(layout, phi).map_err(err)?;
    Ok(perturb::apply_perturbation(&t, &p, alpha).map_err(err)?.data().to_vec())
}

/// Top-k gate from router logits.
#[pyfunction]
fn top_k_gate<'py>(py: Python<'py>, logits: Vec<f64>, k: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &gate_from_logits(&logits, k).map_err(err)?)
}

/// Σ p̄ log p̄ of the batch-mean router distribution.
#[pyfunction]
#[pyo3(name = "load_balance_loss")]
fn py_load_balance_loss(probs: Vec<Vec<f64>>) -> PyResult<f64> {
    let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
    load_balance_loss(&rows).map_err(err)
}

/// Normalised activity score of each neuron of a `batch × width` activation matrix.
#[pyfunction]
#[pyo3(name = "neuron_scores")]
fn py_neuron_scores(activations: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    neuron_scores(&matrix(&activations)?).map_err(err)
}

/// Dormant ratio over several layers' activation matrices.
#[pyfunction]
fn dormant_ratio(layers: Vec<Vec<Vec<f64>>>, tau: f64) -> PyResult<f64> {
    let named = layers
        .iter()
        .enumerate()
        .map(|(i, l)| Ok((format!("layer{i}"), matrix(l)?)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(dormant_report(&named, tau).map_err(err)?.ratio)
}

/// Pairwise cosine matrix of per-group gradients; `None` where a gradient is zero.
#[pyfunction]
fn gradient_cosine(gradients: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Option<f64>>>> {
    let recs: Vec<GradientRecord> = gradients
        .into_iter()
        .enumerate()
        .map(|(group, gradient)| GradientRecord { group, gradient, step: 0 })
        .collect();
    Ok(grad_cosine(&recs).map_err(err)?.values)
}

/// Share of gradient measurements (lists of per-group gradients) with a negative cosine.
#[pyfunction]
fn gradient_conflict_fraction(measurements: Vec<Vec<Vec<f64>>>) -> PyResult<Option<f64>> {
    let ms = measurements
        .into_iter()
        .map(|gs| {
            let recs: Vec<GradientRecord> = gs
                .into_iter()
                .enumerate()
                .map(|(group, gradient)| GradientRecord { group, gradient, step: 0 })
                .collect();
            grad_cosine(&recs).map_err(err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(conflict_fraction(&ms))
}

/// Time-to-threshold and `T / T_standard` for named `(x, y)` learning curves.
#[pyfunction]
#[pyo3(name = "efficiency")]
fn py_efficiency<'py>(py: Python<'py>, curves: Vec<(String, Vec<(u64, f64)>)>, threshold: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &efficiency(&curves, threshold).map_err(err)?)
}

/// Records of a metrics JSONL file as dictionaries.
#[pyfunction]
#[pyo3(name = "read_metrics")]
fn py_read_metrics<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &read_metrics(&path).map_err(err)?)
}

#[pymodule]
fn moerl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyMoeLayer>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(perturb_factor, m)?)?;
    m.add_function(wrap_pyfunction!(apply_perturbation, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_gate, m)?)?;
    m.add_function(wrap_pyfunction!(py_load_balance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_neuron_scores, m)?)?;
    m.add_function(wrap_pyfunction!(dormant_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_conflict_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(py_efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(py_read_metrics, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
