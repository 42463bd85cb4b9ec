//! Python bindings: load or train models and drafters, run forwards and
//! decode in any mode.

use hidden_transfer::config::RunConfig;
use hidden_transfer::corpus::{bundled_tokens, ingest_dir, split_heldout};
use hidden_transfer::heads::{train_medusa, MedusaHeads};
use hidden_transfer::model::{pretrain_base, ModelWeights};
use hidden_transfer::transfer::{transfer_train, TransferBundle};
use hidden_transfer::treedec::{DecodeMode, Decoder, TreeSpec};
use hidden_transfer::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Path { .. } => PyOSError::new_err(e.to_string()),
        Error::Invalid(_) | Error::Config(_) | Error::TreeSpec { .. } | Error::Shape { .. } | Error::CacheOverflow { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn run_config(config: &str) -> Result<RunConfig, Error> {
    RunConfig::from_text(config)
}

fn training_tokens(run: &RunConfig) -> Result<Vec<u32>, Error> {
    let tokens = if run.corpus_dir.is_empty() {
        bundled_tokens()
    } else {
        ingest_dir(&run.corpus_dir)?
    };
    let (train, _) = split_heldout(&tokens, run.heldout_fraction);
    Ok(train.to_vec())
}

/// Byte-level token ids of `text`.
#[pyfunction]
fn encode(text: &str) -> Vec<u32> {
    hidden_transfer::corpus::encode(text.as_bytes())
}

/// Text of byte-level token ids; special ids are dropped.
#[pyfunction]
fn decode(tokens: Vec<u32>) -> String {
    hidden_transfer::corpus::decode(&tokens)
}

/// Frozen base model.
#[pyclass(frozen)]
struct Model(ModelWeights<f32>);

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ModelWeights::load(path).map(Model).map_err(py_err)
    }

    /// Pretrains a base model on the corpus named by `config` (key = value
    /// lines; empty for defaults).
    #[staticmethod]
    #[pyo3(signature = (config = ""))]
    fn pretrain(py: Python<'_>, config: &str) -> PyResult<Self> {
        let run = run_config(config).map_err(py_err)?;
        py.detach(|| {
            let train = training_tokens(&run)?;
            pretrain_base(&train, &run.model_config(), &run.pretrain_config()).map(|(m, _)| Model(m))
        })
        .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.0.config.n_layers
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.0.config.d_model
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.config.vocab_size
    }

    #[getter]
    fn max_positions(&self) -> usize {
        self.0.config.max_positions
    }

    /// Causal logits, one row per token.
    fn logits(&self, py: Python<'_>, tokens: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let out = py.detach(|| self.0.forward_causal(&tokens)).map_err(py_err)?;
        Ok((0..out.logits.rows()).map(|r| out.logits.row(r).to_vec()).collect())
    }
}

/// Trained hidden-transfer projections.
#[pyclass(frozen)]
struct Transfer(TransferBundle<f32>);

#[pymethods]
impl Transfer {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        TransferBundle::load(path).map(Transfer).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (model, config = ""))]
    fn train(py: Python<'_>, model: &Model, config: &str) -> PyResult<Self> {
        let run = run_config(config).map_err(py_err)?;
        py.detach(|| {
            let train = training_tokens(&run)?;
            let tc = run.transfer_config()?;
            transfer_train(&model.0, &train, &tc, &run.train_hyper()).map(|(b, _)| Transfer(b))
        })
        .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.config.k
    }

    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.0.config.layers.clone()
    }
}

/// Trained Medusa heads.
#[pyclass(frozen)]
struct Medusa(MedusaHeads<f32>);

#[pymethods]
impl Medusa {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        MedusaHeads::load(path).map(Medusa).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (model, config = ""))]
    fn train(py: Python<'_>, model: &Model, config: &str) -> PyResult<Self> {
        let run = run_config(config).map_err(py_err)?;
        py.detach(|| {
            let train = training_tokens(&run)?;
            train_medusa(&model.0, &train, run.k, &run.train_hyper()).map(|(h, _)| Medusa(h))
        })
        .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }
}

/// Generated tokens with decoding accounting.
#[pyclass(frozen, get_all)]
struct Generation {
    tokens: Vec<u32>,
    forwards: usize,
    emitted: usize,
    tokens_per_forward: f64,
    acceptance_hist: Vec<usize>,
    wall_ms: f64,
    truncated: bool,
}

#[pymethods]
impl Generation {
    fn __repr__(&self) -> String {
        format!(
            "Generation(emitted={}, forwards={}, tokens_per_forward={:.3})",
            self.emitted, self.forwards, self.tokens_per_forward
        )
    }
}

/// Greedy decoding of `prompt` in `mode`. Tree modes need the matching
/// drafter; `tree` is spec text, defaulting to the (3, 2, 2) tree cut to the
/// drafter depth.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (model, prompt, max_tokens, mode = "autoregressive", transfer = None, medusa = None, tree = None))]
fn generate(
    py: Python<'_>,
    model: &Model,
    prompt: Vec<u32>,
    max_tokens: usize,
    mode: &str,
    transfer: Option<&Transfer>,
    medusa: Option<&Medusa>,
    tree: Option<&str>,
) -> PyResult<Generation> {
    let mode: DecodeMode = mode.parse().map_err(py_err)?;
    let mut dec = Decoder::new(&model.0);
    let mut depth = 1;
    if let Some(t) = transfer {
        dec = dec.with_transfer(&t.0).map_err(py_err)?;
        depth = depth.max(t.0.config.k);
    }
    if let Some(m) = medusa {
        dec = dec.with_medusa(&m.0).map_err(py_err)?;
        depth = depth.max(m.0.k());
    }
    let spec = match tree {
        Some(text) => TreeSpec::parse(text).map_err(py_err)?,
        None => TreeSpec::full(&[3, 2, 2][..depth.min(3)]),
    };
    let dec = dec.with_spec(spec);
    let out = py.detach(|| dec.decode(&prompt, max_tokens, mode)).map_err(py_err)?;
    let s = out.stats;
    Ok(Generation {
        tokens: out.tokens,
        forwards: s.forwards,
        emitted: s.emitted,
        tokens_per_forward: s.tokens_per_forward(),
        acceptance_hist: s.acceptance_hist,
        wall_ms: s.wall.as_secs_f64() * 1e3,
        truncated: s.truncated,
    })
}

#[pymodule]
fn hidden_transfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Transfer>()?;
    m.add_class::<Medusa>()?;
    m.add_class::<Generation>()?;
    Ok(())
}
