//! Python bindings: position-method primitives, models, training and the
//! evaluation protocols.

use std::path::PathBuf;

use alibi_lm::data::{load_corpus, split};
use alibi_lm::eval;
use alibi_lm::position;
use alibi_lm::train::{self, Schedule};
use alibi_lm::{Error, EvalRecord, ModelConfig, PositionMethod, TrainConfig};
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Index { .. } => PyIndexError::new_err(msg),
        Error::Divergence(_) | Error::Checkpoint(_) | Error::Csv(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn nested(values: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    values.chunks(cols).take(rows).map(<[f64]>::to_vec).collect()
}

#[pyfunction]
fn alibi_slopes(n_heads: usize) -> PyResult<Vec<f64>> {
    Ok(position::alibi_slopes(n_heads).map_err(to_py)?.slopes)
}

/// `[heads][query][key]` bias with `-inf` above the diagonal.
#[pyfunction]
fn alibi_mask(n_heads: usize, length: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let mask = position::alibi_mask(n_heads, length).map_err(to_py)?;
    Ok((0..n_heads).map(|h| nested(mask.head(h), length, length)).collect())
}

#[pyfunction]
fn causal_mask(length: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(nested(&position::causal_mask(length).map_err(to_py)?, length, length))
}

#[pyfunction]
fn sinusoidal_table(n_positions: usize, d_model: usize) -> PyResult<Vec<Vec<f64>>> {
    let table = position::sinusoidal_table(n_positions, d_model).map_err(to_py)?;
    Ok(nested(&table, n_positions, d_model))
}

/// Rotates each row of `x`, row `r` placed at position `start + r`.
#[pyfunction]
#[pyo3(signature = (x, base = 10000.0, start = 0))]
fn rotary_rotate(x: Vec<Vec<f64>>, base: f64, start: usize) -> PyResult<Vec<Vec<f64>>> {
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    let flat: Vec<f64> = x.concat();
    let out = position::rotary_rotate_from(&flat, d, base, start).map_err(to_py)?;
    Ok(nested(&out, x.len(), d))
}

#[pyfunction]
#[pyo3(signature = (distance, num_buckets = 32, max_distance = 128))]
fn t5_bucket(distance: i64, num_buckets: usize, max_distance: usize) -> PyResult<usize> {
    position::t5_bucket(distance, num_buckets, max_distance).map_err(to_py)
}

/// Byte tokens of a file.
#[pyfunction]
fn read_tokens(path: PathBuf) -> PyResult<Vec<usize>> {
    Ok(load_corpus(path).map_err(to_py)?.tokens)
}

#[pyclass(name = "EvalRecord", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyEvalRecord {
    l_valid: usize,
    mode: String,
    stride: usize,
    perplexity: f64,
    mean_nll: f64,
    tokens_scored: usize,
    passes: usize,
    wall_seconds: f64,
}

#[pymethods]
impl PyEvalRecord {
    fn __repr__(&self) -> String {
        format!(
            "EvalRecord(l_valid={}, mode={:?}, stride={}, perplexity={:.4}, tokens_scored={}, passes={})",
            self.l_valid, self.mode, self.stride, self.perplexity, self.tokens_scored, self.passes
        )
    }
}

impl From<EvalRecord> for PyEvalRecord {
    fn from(r: EvalRecord) -> Self {
        PyEvalRecord {
            l_valid: r.l_valid,
            mode: r.mode.to_string(),
            stride: r.stride,
            perplexity: r.perplexity,
            mean_nll: r.mean_nll,
            tokens_scored: r.tokens_scored,
            passes: r.passes,
            wall_seconds: r.wall_seconds,
        }
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: alibi_lm::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        position = "alibi",
        vocab_size = 256,
        d_model = 64,
        n_heads = 4,
        n_layers = 2,
        d_ffn = 256,
        dropout = 0.0,
        seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        position: &str,
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ffn: usize,
        dropout: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let position: PositionMethod = position.parse().map_err(to_py)?;
        let config = ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            d_ffn,
            position,
            dropout,
            seed,
        };
        let inner = alibi_lm::Model::new(config).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = train::load_checkpoint(path).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::save_checkpoint(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn position(&self) -> String {
        self.inner.config().position.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Config as a JSON string.
    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).unwrap_or_default()
    }

    /// Logits `[T][vocab]`.
    fn forward(&self, py: Python<'_>, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let v = self.inner.config().vocab_size;
        let logits = py.detach(|| self.inner.forward(&tokens)).map_err(to_py)?;
        Ok(nested(&logits, tokens.len(), v))
    }

    fn token_nll(&self, py: Python<'_>, inputs: Vec<usize>, targets: Vec<usize>) -> PyResult<Vec<f64>> {
        py.detach(|| self.inner.token_nll(&inputs, &targets)).map_err(to_py)
    }

    /// Trains on the train split of the byte file at `corpus`; returns the
    /// per-step losses.
    #[pyo3(signature = (
        corpus,
        steps = 2000,
        seq_len = 64,
        batch_size = 32,
        lr_peak = 3e-4,
        warmup_steps = 100,
        schedule = "inverse_sqrt",
        seed = 0,
        split_fractions = (0.9, 0.05, 0.05)
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus: PathBuf,
        steps: usize,
        seq_len: usize,
        batch_size: usize,
        lr_peak: f64,
        warmup_steps: usize,
        schedule: &str,
        seed: u64,
        split_fractions: (f64, f64, f64),
    ) -> PyResult<Vec<f64>> {
        let schedule: Schedule = schedule.parse().map_err(to_py)?;
        let config = TrainConfig {
            seq_len,
            batch_size,
            steps,
            lr_peak,
            warmup_steps,
            schedule,
            seed,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let (a, b, c) = split_fractions;
        let model = &mut self.inner;
        let log = py
            .detach(|| {
                let corpus = split(load_corpus(&corpus)?, [a, b, c])?;
                train::train(model, &corpus, &config)
            })
            .map_err(to_py)?;
        Ok(log.steps.iter().map(|s| s.loss).collect())
    }

    fn ppl_nonoverlapping(&self, py: Python<'_>, tokens: Vec<usize>, l_valid: usize) -> PyResult<PyEvalRecord> {
        py.detach(|| eval::ppl_nonoverlapping(&self.inner, &tokens, l_valid))
            .map(Into::into)
            .map_err(to_py)
    }

    fn ppl_sliding(&self, py: Python<'_>, tokens: Vec<usize>, l_valid: usize, stride: usize) -> PyResult<PyEvalRecord> {
        py.detach(|| eval::ppl_sliding(&self.inner, &tokens, l_valid, stride))
            .map(Into::into)
            .map_err(to_py)
    }

    #[pyo3(signature = (tokens, lengths, mode = "nonoverlapping", stride = None))]
    fn extrapolation_sweep(
        &self,
        py: Python<'_>,
        tokens: Vec<usize>,
        lengths: Vec<usize>,
        mode: &str,
        stride: Option<usize>,
    ) -> PyResult<Vec<PyEvalRecord>> {
        let mode = mode.parse().map_err(to_py)?;
        let records = py
            .detach(|| eval::extrapolation_sweep(&self.inner, &tokens, &lengths, mode, stride))
            .map_err(to_py)?;
        Ok(records.into_iter().map(Into::into).collect())
    }

    fn loss_by_position(&self, py: Python<'_>, tokens: Vec<usize>, l_valid: usize) -> PyResult<Vec<f64>> {
        py.detach(|| eval::loss_by_position(&self.inner, &tokens, l_valid)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(position={:?}, d_model={}, n_heads={}, n_layers={}, params={})",
            c.position.to_string(),
            c.d_model,
            c.n_heads,
            c.n_layers,
            self.inner.param_count()
        )
    }
}

#[pymodule]
fn alibi_lm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(alibi_slopes, m)?)?;
    m.add_function(wrap_pyfunction!(alibi_mask, m)?)?;
    m.add_function(wrap_pyfunction!(causal_mask, m)?)?;
    m.add_function(wrap_pyfunction!(sinusoidal_table, m)?)?;
    m.add_function(wrap_pyfunction!(rotary_rotate, m)?)?;
    m.add_function(wrap_pyfunction!(t5_bucket, m)?)?;
    m.add_function(wrap_pyfunction!(read_tokens, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEvalRecord>()?;
    Ok(())
}
