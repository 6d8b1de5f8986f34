//! Python bindings for the `iapo` crate.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use iapo::advantage;
use iapo::eval;
use iapo::mi::{self, MiConfig, MiEstimator};
use iapo::model::{self, AnswerProbe, Decoding};
use iapo::theory::{self, AdvantageMode};
use iapo::vocab::{self, TokenId};

fn to_py(e: iapo::Error) -> PyErr {
    match e {
        iapo::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tokens(text: &str) -> PyResult<Vec<TokenId>> {
    vocab::Vocab::new().tokenize(text).map_err(to_py)
}

fn text(ids: &[TokenId]) -> String {
    vocab::Vocab::new().detokenize(ids)
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (d_model=64, n_layers=2, n_heads=4, d_ff=256, max_seq_len=256))]
    fn new(d_model: usize, n_layers: usize, n_heads: usize, d_ff: usize, max_seq_len: usize) -> PyResult<Self> {
        let inner = model::ModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq_len,
            vocab_size: vocab::Vocab::new().len(),
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn max_seq_len(&self) -> usize {
        self.inner.max_seq_len
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Task", from_py_object)]
#[derive(Clone)]
struct PyTask {
    inner: vocab::Task,
}

#[pymethods]
impl PyTask {
    #[getter]
    fn query(&self) -> String {
        text(&self.inner.query)
    }

    #[getter]
    fn answer(&self) -> String {
        text(&[self.inner.answer])
    }

    /// True iff the digit right after the first `<answer>` in `completion` is correct.
    fn check(&self, completion: &str) -> PyResult<bool> {
        Ok(vocab::check_answer(&self.inner, &tokens(completion)?))
    }

    fn __repr__(&self) -> String {
        format!("Task(query={:?}, answer={:?})", self.query(), self.answer())
    }
}

#[pyfunction]
fn generate_task(seed: u64, n: usize) -> PyResult<PyTask> {
    Ok(PyTask {
        inner: vocab::generate_task(seed, n).map_err(to_py)?,
    })
}

#[pyfunction]
fn vocabulary() -> Vec<String> {
    vocab::Vocab::new().tokens().to_vec()
}

#[pyclass(name = "Policy")]
struct PyPolicy {
    inner: model::Params,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (config=None, seed=0, init_std=0.02))]
    fn new(config: Option<PyModelConfig>, seed: u64, init_std: f64) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        Ok(Self {
            inner: model::Params::init_with_std(cfg, seed, init_std).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(path).map_err(to_py)?.params,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(path, &self.inner, None, serde_json::Value::Null).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Next-token logits after `prefix` (space-separated tokens).
    fn next_logits(&self, prefix: &str) -> PyResult<Vec<f64>> {
        theory::state_logits(&self.inner, &tokens(prefix)?).map_err(to_py)
    }

    /// Samples a completion; `temperature=0` decodes greedily.
    #[pyo3(signature = (query, budget=64, temperature=1.0, seed=0))]
    fn sample(&self, query: &str, budget: usize, temperature: f64, seed: u64) -> PyResult<String> {
        let decoding = if temperature == 0.0 {
            Decoding::Greedy
        } else {
            Decoding::Temperature(temperature)
        };
        let mut r = iapo::rng::stream(seed, &[]);
        let out = model::sample_completion(&self.inner, &tokens(query)?, budget, decoding, vocab::Vocab::EOS, &mut r)
            .map_err(to_py)?;
        Ok(text(&out.tokens))
    }

    /// Per-token informativeness profile: keys `pre`, `post`, `scores`,
    /// `full_passes`, `cached_passes`.
    #[pyo3(signature = (query, completion, estimator="chunked", chunk_size=8))]
    fn mi_profile(&self, query: &str, completion: &str, estimator: &str, chunk_size: usize) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let estimator = match estimator {
            "naive" => MiEstimator::Naive,
            "preload" => MiEstimator::Preload,
            "chunked" => MiEstimator::Chunked,
            other => return Err(PyValueError::new_err(format!("unknown estimator `{other}`"))),
        };
        let probe = AnswerProbe::standard(&vocab::Vocab::new());
        let cfg = MiConfig { estimator, chunk_size };
        let p = mi::mi_profile(&self.inner, &tokens(query)?, &tokens(completion)?, &probe, &cfg).map_err(to_py)?;
        Ok(BTreeMap::from([
            ("pre".to_string(), p.pre_entropies),
            ("post".to_string(), p.post_entropies),
            ("scores".to_string(), p.scores),
            ("full_passes".to_string(), vec![p.forwards.full_passes as f64]),
            ("cached_passes".to_string(), vec![p.forwards.cached_passes as f64]),
        ]))
    }
}

#[pyfunction]
#[pyo3(signature = (x, values, eps=1e-6))]
fn normalize(x: f64, values: Vec<f64>, eps: f64) -> PyResult<f64> {
    advantage::normalize(x, &values, eps).map_err(to_py)
}

#[pyfunction]
fn pass_at_k(correct: Vec<Vec<bool>>, k: usize) -> PyResult<f64> {
    eval::pass_at_k(&correct, k).map_err(to_py)
}

#[pyfunction]
fn length_at_k(lengths: Vec<Vec<usize>>, k: usize) -> PyResult<f64> {
    eval::length_at_k(&lengths, k).map_err(to_py)
}

/// `(realized ΔH, predicted ΔH)` per η after one logit step `z += η·(±π)`.
#[pyfunction]
#[pyo3(signature = (logits, positive, etas))]
fn entropy_change(logits: Vec<f64>, positive: bool, etas: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    let mode = if positive { AdvantageMode::PlusProb } else { AdvantageMode::MinusProb };
    let r = theory::entropy_change_check(&logits, mode, &etas).map_err(to_py)?;
    Ok(r.rows.iter().map(|row| (row.realized, row.predicted)).collect())
}

/// Runs the command-line interface; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    iapo::cli::run_cli(std::iter::once("iapo".to_string()).chain(args))
}

#[pymodule]
fn iapo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(length_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_change, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
