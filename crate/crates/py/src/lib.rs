//! Python bindings for `prefval`.
//!
//! Build with `cargo build -p prefval-py --release --features extension-module`
//! and import the resulting shared library as `prefval`.

use std::path::PathBuf;

use prefval::analysis::run_lossdiff_irm_pipeline;
use prefval::config::ExperimentConfig;
use prefval::data::{self, SynthConfig};
use prefval::influence;
use prefval::objective::{self, Objective};
use prefval::policy::{self, ModelConfig};
use prefval::proxy::{self, ProxyScorer};
use prefval::selection::{self, Method, SelectionBand, SelectionMask};
use prefval::stats;
use prefval::trainer::{self, Optimizer, TrainOpts};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: prefval::Error) -> PyErr {
    match e {
        prefval::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for prefval::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Small autoregressive policy (`log_linear` or `mlp`).
#[pyclass(name = "PolicyModel", module = "prefval", from_py_object)]
#[derive(Clone)]
pub struct PyPolicyModel {
    inner: policy::PolicyModel,
}

#[pymethods]
impl PyPolicyModel {
    #[staticmethod]
    #[pyo3(signature = (vocab, init_scale = 0.05, seed = 0))]
    fn log_linear(vocab: usize, init_scale: f64, seed: u64) -> PyResult<Self> {
        let inner = policy::init_model(&ModelConfig::log_linear(vocab, init_scale, seed)).py_err()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (vocab, hidden_dims, init_scale = 0.05, seed = 0))]
    fn mlp(vocab: usize, hidden_dims: Vec<usize>, init_scale: f64, seed: u64) -> PyResult<Self> {
        let inner = policy::init_model(&ModelConfig::mlp(vocab, hidden_dims, init_scale, seed)).py_err()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::load_checkpoint(path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, path).py_err()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner.layers().iter().map(|l| l.name.clone()).collect()
    }

    /// Next-token log-probabilities after token `prev`.
    fn log_probs(&self, prev: usize) -> PyResult<Vec<f64>> {
        if prev >= self.inner.vocab_size() {
            return Err(PyValueError::new_err(format!("token {prev} out of range")));
        }
        Ok(self.inner.log_probs(prev))
    }

    fn seq_logprob(&self, prompt: Vec<usize>, response: Vec<usize>) -> PyResult<f64> {
        let p = policy::TokenSeq::new(prompt).py_err()?;
        let r = policy::TokenSeq::new(response).py_err()?;
        policy::seq_logprob(&self.inner, &p, &r).py_err()
    }

    fn __repr__(&self) -> String {
        format!("PolicyModel({:?}, vocab={}, params={})", self.inner.config().arch, self.inner.vocab_size(), self.inner.num_params())
    }
}

/// One `(prompt, chosen, rejected)` preference pair.
#[pyclass(name = "PreferencePair", module = "prefval", from_py_object)]
#[derive(Clone)]
pub struct PyPreferencePair {
    inner: data::PreferencePair,
}

#[pymethods]
impl PyPreferencePair {
    #[new]
    fn new(id: String, prompt: Vec<usize>, chosen: Vec<usize>, rejected: Vec<usize>) -> PyResult<Self> {
        let inner = data::PreferencePair::new(
            id,
            policy::TokenSeq::new(prompt).py_err()?,
            policy::TokenSeq::new(chosen).py_err()?,
            policy::TokenSeq::new(rejected).py_err()?,
        );
        inner.validate().py_err()?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn prompt(&self) -> Vec<usize> {
        self.inner.prompt.tokens().to_vec()
    }

    #[getter]
    fn chosen(&self) -> Vec<usize> {
        self.inner.chosen.tokens().to_vec()
    }

    #[getter]
    fn rejected(&self) -> Vec<usize> {
        self.inner.rejected.tokens().to_vec()
    }

    #[getter]
    fn flipped(&self) -> Option<bool> {
        self.inner.flipped
    }

    #[getter]
    fn true_margin(&self) -> Option<f64> {
        self.inner.true_margin
    }

    fn __repr__(&self) -> String {
        format!("PreferencePair({:?})", self.inner.id)
    }
}

/// Preference objective: `"dpo"` or `"slic"` with temperature `beta`.
#[pyclass(name = "Objective", module = "prefval", from_py_object)]
#[derive(Clone, Copy)]
pub struct PyObjective {
    inner: objective::ObjectiveKind,
}

#[pymethods]
impl PyObjective {
    #[new]
    #[pyo3(signature = (kind = "dpo", beta = objective::DEFAULT_BETA))]
    fn new(kind: &str, beta: f64) -> PyResult<Self> {
        let kind: Objective = kind.parse().py_err()?;
        Ok(Self {
            inner: objective::ObjectiveKind::new(kind, beta).py_err()?,
        })
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    fn loss(&self, delta: f64) -> f64 {
        self.inner.loss_from_delta(delta)
    }

    fn __repr__(&self) -> String {
        format!("Objective({:?}, beta={})", self.inner.kind, self.inner.beta)
    }
}

fn unwrap_pairs(pairs: &[PyPreferencePair]) -> Vec<data::PreferencePair> {
    pairs.iter().map(|p| p.inner.clone()).collect()
}

fn wrap_pairs(pairs: Vec<data::PreferencePair>) -> Vec<PyPreferencePair> {
    pairs.into_iter().map(|inner| PyPreferencePair { inner }).collect()
}

fn train_opts(epochs: usize, batch_size: usize, lr: f64, optimizer: &str, seed: u64) -> PyResult<TrainOpts> {
    let optimizer: Optimizer = optimizer.parse().py_err()?;
    Ok(TrainOpts {
        epochs,
        batch_size,
        learning_rate: lr,
        optimizer,
        shuffle_seed: seed,
        checkpoint_every_epoch: false,
    })
}

fn band(b: (f64, f64)) -> PyResult<SelectionBand> {
    SelectionBand::new(b.0, b.1).py_err()
}

fn mask_of(flags: Vec<bool>) -> PyResult<SelectionMask> {
    let ids = (0..flags.len()).map(|i| i.to_string()).collect();
    SelectionMask::new(ids, flags, Method::Full).py_err()
}

/// Synthetic pairs labelled by a planted bigram reward, with labels flipped at `flip_rate`.
#[pyfunction]
#[pyo3(signature = (n, flip_rate = 0.2, seed = 7, vocab = 8, prompt_len = 4, response_len = 6))]
fn gen_synthetic(
    n: usize,
    flip_rate: f64,
    seed: u64,
    vocab: usize,
    prompt_len: usize,
    response_len: usize,
) -> PyResult<Vec<PyPreferencePair>> {
    let cfg = SynthConfig::new(vocab, prompt_len, response_len, n, flip_rate, seed);
    Ok(wrap_pairs(data::gen_synthetic(&cfg).py_err()?))
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PyPreferencePair>> {
    Ok(wrap_pairs(data::load_dataset(path).py_err()?))
}

#[pyfunction]
fn save_dataset(pairs: Vec<PyPreferencePair>, path: PathBuf) -> PyResult<()> {
    data::save_dataset(&unwrap_pairs(&pairs), path).py_err()
}

#[pyfunction]
fn delta_theta(model: &PyPolicyModel, reference: &PyPolicyModel, pair: &PyPreferencePair, beta: f64) -> PyResult<f64> {
    objective::delta_theta(&model.inner, &reference.inner, &pair.inner, beta).py_err()
}

#[pyfunction]
fn pair_loss(obj: &PyObjective, model: &PyPolicyModel, reference: &PyPolicyModel, pair: &PyPreferencePair) -> PyResult<f64> {
    objective::pair_loss(&obj.inner, &model.inner, &reference.inner, &pair.inner).py_err()
}

#[pyfunction]
fn pair_loss_grad(
    obj: &PyObjective,
    model: &PyPolicyModel,
    reference: &PyPolicyModel,
    pair: &PyPreferencePair,
) -> PyResult<Vec<f64>> {
    Ok(objective::pair_loss_grad(&obj.inner, &model.inner, &reference.inner, &pair.inner)
        .py_err()?
        .into_values())
}

/// Exact influence `<mean validation loss gradient, pair loss gradient>` for every pair.
#[pyfunction]
fn influence_scores(
    obj: &PyObjective,
    model: &PyPolicyModel,
    reference: &PyPolicyModel,
    val: Vec<PyPreferencePair>,
    pairs: Vec<PyPreferencePair>,
) -> PyResult<Vec<f64>> {
    influence::influence_scores(&obj.inner, &model.inner, &reference.inner, &unwrap_pairs(&val), &unwrap_pairs(&pairs)).py_err()
}

#[pyfunction]
fn influence_closed(
    obj: &PyObjective,
    model: &PyPolicyModel,
    reference: &PyPolicyModel,
    val: Vec<PyPreferencePair>,
    pair: &PyPreferencePair,
) -> PyResult<f64> {
    influence::influence_closed(&obj.inner, &model.inner, &reference.inner, &unwrap_pairs(&val), &pair.inner).py_err()
}

#[pyfunction]
#[pyo3(signature = (model, pairs, epochs = 1, batch_size = 16, lr = 0.05, optimizer = "adam", seed = 0))]
fn sft_pretrain(
    model: &PyPolicyModel,
    pairs: Vec<PyPreferencePair>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    optimizer: &str,
    seed: u64,
) -> PyResult<PyPolicyModel> {
    let opts = train_opts(epochs, batch_size, lr, optimizer, seed)?;
    Ok(PyPolicyModel {
        inner: trainer::sft_pretrain(&model.inner, &unwrap_pairs(&pairs), &opts).py_err()?,
    })
}

#[pyfunction]
#[pyo3(signature = (model, reference, pairs, obj, epochs = 1, batch_size = 16, lr = 0.05, optimizer = "adam", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn align_train(
    model: &PyPolicyModel,
    reference: &PyPolicyModel,
    pairs: Vec<PyPreferencePair>,
    obj: &PyObjective,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    optimizer: &str,
    seed: u64,
) -> PyResult<PyPolicyModel> {
    let opts = train_opts(epochs, batch_size, lr, optimizer, seed)?;
    let (inner, _) = trainer::align_train(&model.inner, &reference.inner, &unwrap_pairs(&pairs), &obj.inner, &opts).py_err()?;
    Ok(PyPolicyModel { inner })
}

/// Validation-aligned auxiliary model trained from `init`.
#[pyfunction]
#[pyo3(signature = (init, reference, val, obj, epochs = 1, batch_size = 16, lr = 0.05, optimizer = "adam", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_aux_val_model(
    init: &PyPolicyModel,
    reference: &PyPolicyModel,
    val: Vec<PyPreferencePair>,
    obj: &PyObjective,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    optimizer: &str,
    seed: u64,
) -> PyResult<PyPolicyModel> {
    let opts = train_opts(epochs, batch_size, lr, optimizer, seed)?;
    Ok(PyPolicyModel {
        inner: proxy::train_aux_val_model(&init.inner, &reference.inner, &unwrap_pairs(&val), &obj.inner, &opts).py_err()?,
    })
}

/// `θ − η ∇L_val(θ)`.
#[pyfunction]
fn one_step_val_model(
    model: &PyPolicyModel,
    reference: &PyPolicyModel,
    val: Vec<PyPreferencePair>,
    obj: &PyObjective,
    eta: f64,
) -> PyResult<PyPolicyModel> {
    Ok(PyPolicyModel {
        inner: proxy::one_step_val_model(&model.inner, &reference.inner, &unwrap_pairs(&val), &obj.inner, eta).py_err()?,
    })
}

/// `(lossdiffs, irms)` of every pair, forward passes only.
#[pyfunction]
fn proxy_scores(
    obj: &PyObjective,
    model: &PyPolicyModel,
    aux: &PyPolicyModel,
    reference: &PyPolicyModel,
    pairs: Vec<PyPreferencePair>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let scores = ProxyScorer::new(&obj.inner, &model.inner, &aux.inner, &reference.inner)
        .py_err()?
        .score_all(&unwrap_pairs(&pairs))
        .py_err()?;
    Ok(scores.iter().map(|s| (s.lossdiff, s.irm)).unzip())
}

/// `q(lo) < s < q(hi)` with linear-interpolation percentiles.
#[pyfunction]
fn band_mask(scores: Vec<f64>, lo: f64, hi: f64) -> PyResult<Vec<bool>> {
    stats::band_mask(&scores, lo, hi).py_err()
}

#[pyfunction]
#[pyo3(signature = (lossdiffs, irms, xi = (10.0, 90.0), tau = (10.0, 90.0)))]
fn lossdiff_irm_select(lossdiffs: Vec<f64>, irms: Vec<f64>, xi: (f64, f64), tau: (f64, f64)) -> PyResult<Vec<bool>> {
    let ids: Vec<String> = (0..lossdiffs.len()).map(|i| i.to_string()).collect();
    Ok(selection::lossdiff_irm_select(&ids, &lossdiffs, &irms, &band(xi)?, &band(tau)?)
        .py_err()?
        .selected)
}

#[pyfunction]
fn overlap_coefficient(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    selection::overlap_coefficient(&mask_of(a)?, &mask_of(b)?).py_err()
}

#[pyfunction]
fn correlations<'py>(py: Python<'py>, xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let c = stats::correlations(&xs, &ys).py_err()?;
    let d = PyDict::new(py);
    d.set_item("pearson", c.pearson)?;
    d.set_item("spearman", c.spearman)?;
    Ok(d)
}

#[pyfunction]
fn eval_metrics<'py>(
    py: Python<'py>,
    model: &PyPolicyModel,
    reference: &PyPolicyModel,
    test: Vec<PyPreferencePair>,
    obj: &PyObjective,
) -> PyResult<Bound<'py, PyDict>> {
    let m = trainer::eval_metrics(&model.inner, &reference.inner, &unwrap_pairs(&test), &obj.inner).py_err()?;
    let d = PyDict::new(py);
    d.set_item("eval_loss", m.eval_loss)?;
    d.set_item("mean_margin", m.mean_margin)?;
    d.set_item("rank_accuracy", m.rank_accuracy)?;
    Ok(d)
}

/// Warm-up, LossDiff/IRM scoring, selection, retraining, and evaluation on
/// synthetic splits built from an experiment config (TOML path or defaults).
#[pyfunction]
#[pyo3(signature = (config = None, seed = None))]
fn run_pipeline<'py>(py: Python<'py>, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p).py_err()?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    let splits = cfg.build_splits().py_err()?;
    let out = run_lossdiff_irm_pipeline(&splits, &cfg.objective().py_err()?, &cfg).py_err()?;
    let d = PyDict::new(py);
    d.set_item("selected", out.mask.selected.clone())?;
    d.set_item("pair_ids", out.mask.pair_ids.clone())?;
    d.set_item("lossdiff", out.scored.lossdiffs.clone())?;
    d.set_item("irm", out.scored.irms.clone())?;
    d.set_item("influence", out.scored.if_scores.clone())?;
    d.set_item("eval_loss", out.metrics.eval_loss)?;
    d.set_item("mean_margin", out.metrics.mean_margin)?;
    d.set_item("rank_accuracy", out.metrics.rank_accuracy)?;
    d.set_item("model", PyPolicyModel { inner: out.model })?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "prefval")]
fn prefval_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPolicyModel>()?;
    m.add_class::<PyPreferencePair>()?;
    m.add_class::<PyObjective>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(delta_theta, m)?)?;
    m.add_function(wrap_pyfunction!(pair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pair_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(influence_scores, m)?)?;
    m.add_function(wrap_pyfunction!(influence_closed, m)?)?;
    m.add_function(wrap_pyfunction!(sft_pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(align_train, m)?)?;
    m.add_function(wrap_pyfunction!(train_aux_val_model, m)?)?;
    m.add_function(wrap_pyfunction!(one_step_val_model, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_scores, m)?)?;
    m.add_function(wrap_pyfunction!(band_mask, m)?)?;
    m.add_function(wrap_pyfunction!(lossdiff_irm_select, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(correlations, m)?)?;
    m.add_function(wrap_pyfunction!(eval_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
