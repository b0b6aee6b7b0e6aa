//! Python bindings: vocabulary, corpus generation, training, embedding,
//! accuracy-matrix aggregation and the objective gradient check.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use xlembed::config::RunConfig;
use xlembed::data::load_split;
use xlembed::eval::{DocumentEmbedder, EmbeddingMatrix, ModelEmbedder};
use xlembed::gradcheck::{check_objective, ObjectiveCheck};
use xlembed::train::{train as run_training, Trainer};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn config_from(config: Option<&str>) -> PyResult<RunConfig> {
    match config {
        Some(text) => RunConfig::parse(text).map_err(value_err),
        None => Ok(RunConfig::default()),
    }
}

#[pyclass(module = "xlembed_py")]
struct Vocabulary {
    inner: xlembed::tokenizer::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    /// Learns a BPE vocabulary of at most `size` tokens.
    #[staticmethod]
    fn learn(corpus: Vec<String>, size: usize) -> PyResult<Self> {
        let inner = xlembed::tokenizer::learn_bpe(&corpus, size).map_err(value_err)?;
        Ok(Vocabulary { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = xlembed::tokenizer::Vocabulary::load(&path).map_err(value_err)?;
        Ok(Vocabulary { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "xlembed_py")]
struct Embedder {
    inner: ModelEmbedder,
}

#[pymethods]
impl Embedder {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let inner = ModelEmbedder::load(&checkpoint).map_err(value_err)?;
        Ok(Embedder { inner })
    }

    #[getter]
    fn languages(&self) -> Vec<String> {
        self.inner.languages.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.model.config().d_model
    }

    /// One embedding row per document.
    fn embed(&self, docs: Vec<String>) -> PyResult<Vec<Vec<f32>>> {
        let m = self.inner.embed_documents(&docs).map_err(value_err)?;
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }
}

#[pyclass(module = "xlembed_py")]
struct AccuracyMatrix {
    inner: xlembed::eval::AccuracyMatrix,
}

#[pymethods]
impl AccuracyMatrix {
    #[new]
    fn new(languages: Vec<String>, cells: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = xlembed::eval::AccuracyMatrix::new(languages, cells).map_err(value_err)?;
        Ok(AccuracyMatrix { inner })
    }

    fn cross(&self) -> Option<f64> {
        self.inner.cross()
    }

    fn same(&self) -> f64 {
        self.inner.same()
    }

    fn all(&self) -> f64 {
        self.inner.all()
    }

    fn x_cross(&self, row: usize) -> PyResult<f64> {
        if row >= self.inner.languages.len() {
            return Err(value_err(format!("row {row} out of range")));
        }
        self.inner.x_cross(row).ok_or_else(|| value_err("fewer than two languages"))
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Writes a synthetic corpus described by the `synth` section of `config` (JSON).
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn generate_corpus(out_dir: PathBuf, config: Option<&str>) -> PyResult<()> {
    let cfg = config_from(config)?;
    xlembed::synth::generate(&cfg.synth, &out_dir).map_err(runtime_err)?;
    Ok(())
}

/// Trains on `<corpus>/train.*` and returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (corpus, vocab, out_dir, config=None, bilingual=false))]
fn train(
    py: Python<'_>,
    corpus: PathBuf,
    vocab: &Vocabulary,
    out_dir: PathBuf,
    config: Option<&str>,
    bilingual: bool,
) -> PyResult<PathBuf> {
    let mut cfg = config_from(config)?;
    cfg.data.bilingual |= bilingual;
    let split = load_split(&corpus, "train").map_err(value_err)?;
    let v = vocab.inner.clone();
    py.detach(move || {
        let mut trainer = Trainer::new(cfg.model, cfg.train, cfg.loss, cfg.data, &split, &v).map_err(value_err)?;
        let outcome = run_training(&mut trainer, &out_dir).map_err(runtime_err)?;
        Ok(outcome.final_checkpoint)
    })
}

/// Finite-difference check of the full objective; returns (passed, worst relative error).
#[pyfunction]
#[pyo3(signature = (config=None, pairs=2, rel_tol=1e-3))]
fn grad_check(config: Option<&str>, pairs: usize, rel_tol: f64) -> PyResult<(bool, f64)> {
    let cfg = config_from(config)?;
    let spec = ObjectiveCheck {
        model: cfg.model,
        loss: cfg.loss,
        pairs,
        seed: cfg.train.seed,
        step: 1e-6,
        rel_tol,
    };
    let r = check_objective(&spec).map_err(runtime_err)?;
    Ok((r.report.passed(), r.report.max_rel_err()))
}

#[pyfunction]
fn read_embeddings(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    let m = EmbeddingMatrix::read(&path).map_err(value_err)?;
    Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
}

#[pymodule]
fn xlembed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Embedder>()?;
    m.add_class::<AccuracyMatrix>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    Ok(())
}
