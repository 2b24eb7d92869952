//! Python bindings: configs, models, training runs and the diagnostics
//! readers.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use normformer_core::cli::{self, RunManifest};
use normformer_core::config::LabConfig;
use normformer_core::data::{self, Corpus};
use normformer_core::diagnostics::{self, Window};
use normformer_core::model::{self as core_model, checkpoint};
use normformer_core::numerics::{self, Tensor};
use normformer_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

/// A full lab configuration (model, training, data, diagnostics, sweep).
///
/// `Config(text=None, path=None, overrides=[])`; overrides are `key=value`
/// strings applied last.
#[pyclass(name = "Config", module = "normformer_lab", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: LabConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=None, path=None, overrides=Vec::new()))]
    fn new(text: Option<&str>, path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = match (text, path) {
            (Some(_), Some(_)) => return Err(PyValueError::new_err("pass either text or path, not both")),
            (Some(t), None) => {
                let mut entries = normformer_core::config::parse_entries(t).map_err(err)?;
                entries.extend(normformer_core::config::parse_overrides(&overrides).map_err(err)?);
                LabConfig::from_entries(&entries).map_err(err)?
            }
            (None, p) => LabConfig::load(p.as_deref(), &overrides).map_err(err)?,
        };
        Ok(Self { inner })
    }

    /// Canonical `key = value` text, every key included.
    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }

    fn as_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.inner.to_kv().lines().filter_map(|l| l.split_once(" = ")) {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn __getitem__(&self, key: &str) -> PyResult<String> {
        let full = normformer_core::config::resolve_key(key).map_err(PyKeyError::new_err)?;
        let prefix = format!("{full} = ");
        self.inner
            .to_kv()
            .lines()
            .find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
            .ok_or_else(|| PyKeyError::new_err(key.to_string()))
    }

    /// `(total, added_by_modifications)` from the closed form.
    fn parameter_count(&self) -> (usize, usize) {
        let c = core_model::count_parameters(&self.inner.model);
        (c.total, c.added_by_modifications)
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.model.variant)
    }
}

/// A transformer language model with its parameters.
#[pyclass(name = "Model", module = "normformer_lab")]
struct PyModel {
    inner: core_model::Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised model for `config` (defaults when omitted).
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.model).unwrap_or_default();
        Ok(Self {
            inner: core_model::Model::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, &path).map_err(err)
    }

    /// Causal logits, one row of `vocab_size` floats per position.
    fn forward_clm(&self, py: Python<'_>, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let t = py.detach(|| self.inner.forward_clm(&tokens)).map_err(err)?;
        Ok(rows(&t))
    }

    /// Bidirectional logits; `mask_positions` marks where a loss would apply.
    #[pyo3(signature = (tokens, mask_positions=Vec::new()))]
    fn forward_mlm(&self, py: Python<'_>, tokens: Vec<usize>, mask_positions: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let mask: BTreeSet<usize> = mask_positions.into_iter().collect();
        let t = py.detach(|| self.inner.forward_mlm(&tokens, &mask)).map_err(err)?;
        Ok(rows(&t))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_params()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.flatten().into_iter().map(|(n, _)| n).collect()
    }

    /// `(shape, flat values)` of one parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        self.inner
            .params
            .flatten()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| (t.shape().to_vec(), t.data().to_vec()))
            .ok_or_else(|| PyKeyError::new_err(name.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {} params)", self.inner.config.variant, self.num_params())
    }
}

fn manifest_dict<'py>(py: Python<'py>, m: &RunManifest) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("run_id", &m.run_id)?;
    d.set_item("output_dir", &m.output_dir)?;
    d.set_item("completed", m.completed)?;
    d.set_item("diverged", m.diverged)?;
    d.set_item("divergence_cause", &m.divergence_cause)?;
    d.set_item("divergence_step", m.divergence_step)?;
    d.set_item("steps_completed", m.steps_completed)?;
    d.set_item("final_valid_loss", m.final_valid_loss)?;
    d.set_item("final_valid_ppl", m.final_valid_ppl)?;
    d.set_item("parameter_count", m.parameter_count)?;
    Ok(d)
}

/// Trains under `config`, writing all run files to `out`, and returns the
/// run manifest as a dict.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig, out: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let manifest = py
        .detach(|| {
            let corpus = Corpus::load(&cfg.data)?;
            cli::run_training(&cfg, &corpus, &out).map(|a| a.manifest)
        })
        .map_err(err)?;
    manifest_dict(py, &manifest)
}

#[pyfunction]
fn read_manifest<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    manifest_dict(py, &RunManifest::read(&run_dir).map_err(err)?)
}

fn gradnorms(run_dir: &Path) -> PyResult<Vec<diagnostics::GradNormRecord>> {
    let path = run_dir.join(cli::GRADNORM);
    let text = fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    diagnostics::parse_gradnorm_csv(&text, &path.display().to_string()).map_err(err)
}

/// First-layer over last-layer mean L1 gradient norm of `param` within the
/// inclusive step window, read from a run directory.
#[pyfunction]
fn mismatch_ratio(run_dir: PathBuf, param: &str, start: usize, end: usize) -> PyResult<f64> {
    diagnostics::mismatch_ratio(&gradnorms(&run_dir)?, param, Window { start, end }).map_err(err)
}

/// Mean L1 gradient norm per layer of `param` within the window.
#[pyfunction]
fn layer_means(run_dir: PathBuf, param: &str, start: usize, end: usize) -> PyResult<Vec<(usize, f64)>> {
    let m = diagnostics::layer_means(&gradnorms(&run_dir)?, param, Window { start, end }).map_err(err)?;
    Ok(m.into_iter().collect())
}

/// Markdown report over finished run directories.
#[pyfunction]
fn report(run_dirs: Vec<PathBuf>) -> PyResult<String> {
    cli::cmd_report(&run_dirs, None).map_err(err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("normformer-lab".to_string()).chain(args).collect();
    py.detach(|| cli::run(argv))
}

#[pyfunction]
fn tokenize(text: &[u8]) -> Vec<usize> {
    data::tokenize_bytes(text)
}

#[pyfunction]
fn detokenize<'py>(py: Python<'py>, tokens: Vec<usize>) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &data::detokenize(&tokens))
}

#[pyfunction]
#[pyo3(signature = (n_bytes, seed=7))]
fn synthetic_text<'py>(py: Python<'py>, n_bytes: usize, seed: u64) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &data::synthetic_text(n_bytes, seed))
}

/// LayerNorm of each row; `beta=None` drops the bias.
#[pyfunction]
#[pyo3(signature = (x, gamma, beta=None, eps=1e-5))]
fn layer_norm(x: Vec<Vec<f64>>, gamma: Vec<f64>, beta: Option<Vec<f64>>, eps: f64) -> PyResult<Vec<Vec<f64>>> {
    let beta = beta.map(Tensor::from_vec);
    let y = numerics::layer_norm(&matrix(x)?, &Tensor::from_vec(gamma), beta.as_ref(), eps, true).map_err(err)?;
    Ok(rows(&y))
}

#[pyfunction]
fn softmax(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&numerics::softmax(&matrix(x)?)))
}

#[pyfunction]
fn gelu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(numerics::gelu_scalar).collect()
}

#[pymodule]
fn normformer_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(read_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(mismatch_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(layer_means, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_text, m)?)?;
    m.add_function(wrap_pyfunction!(layer_norm, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(gelu, m)?)?;
    m.add("VOCAB_SIZE", data::VOCAB_SIZE)?;
    m.add("PAD", data::PAD)?;
    m.add("MASK", data::MASK)?;
    Ok(())
}
