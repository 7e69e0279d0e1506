//! Python bindings for the `cyclegen` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cyclegen::corpus::{self, Vocab, WorldConfig};
use cyclegen::experiment::{self, EvalOptions};
use cyclegen::formats::{self, FormatId, StructuredRecord};
use cyclegen::inference::{BeamConfig, Translator};
use cyclegen::metrics;
use cyclegen::model::{self as cg_model, ModelConfig};
use cyclegen::training::{self, TrainConfig};
use cyclegen::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Format(_) | Error::InvalidRecord(_) | Error::Config(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn format_id(name: &str) -> PyResult<FormatId> {
    name.parse::<FormatId>().map_err(|e| PyValueError::new_err(e.to_string()))
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A structured record in one of the formats `kg`, `tripleset`, `mr`, `totto`.
#[pyclass(name = "Record", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRecord {
    inner: StructuredRecord,
}

#[pymethods]
impl PyRecord {
    /// Parses a linearized record.
    #[staticmethod]
    fn parse(text: &str, format: &str) -> PyResult<Self> {
        let inner = formats::parse(text, format_id(format)?).map_err(|e| to_py(e.into()))?;
        Ok(PyRecord { inner })
    }

    /// Builds a record from `(subject, relation, object)` tuples.
    #[staticmethod]
    fn from_triples(triples: Vec<(String, String, String)>, format: &str) -> PyResult<Self> {
        let ts = triples
            .iter()
            .map(|(s, r, o)| formats::Triple::new(s, r, o))
            .collect::<cyclegen::Result<Vec<_>>>()
            .map_err(to_py)?;
        let f = format_id(format)?;
        let inner = if f == FormatId::Totto {
            StructuredRecord::table("", "", ts)
        } else {
            StructuredRecord::new(f, ts, None)
        }
        .map_err(to_py)?;
        Ok(PyRecord { inner })
    }

    #[getter]
    fn format(&self) -> String {
        self.inner.format().name().to_string()
    }

    fn triples(&self) -> Vec<(String, String, String)> {
        self.inner
            .triples()
            .iter()
            .map(|t| (t.subject().to_string(), t.relation().to_string(), t.object().to_string()))
            .collect()
    }

    fn serialize(&self) -> PyResult<String> {
        formats::serialize(&self.inner).map_err(to_py)
    }

    fn convert(&self, format: &str) -> PyResult<Self> {
        let inner = formats::convert(&self.inner, format_id(format)?).map_err(to_py)?;
        Ok(PyRecord { inner })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> PyResult<String> {
        Ok(format!("Record({:?}, {:?})", self.format(), self.serialize()?))
    }
}

/// A trained model loaded from a checkpoint directory.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: cg_model::Model,
    vocab: Vocab,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, vocab, _) = training::load_run(&path).map_err(to_py)?;
        Ok(PyModel { model, vocab })
    }

    #[getter]
    fn d_style(&self) -> usize {
        self.model.config.d_style
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Generates text for a record. `beams=1` decodes greedily.
    #[pyo3(signature = (record, beams = 5))]
    fn d2t(&self, py: Python<'_>, record: &PyRecord, beams: usize) -> PyResult<String> {
        let mut beam = BeamConfig::d2t_default(self.model.config.max_len);
        beam.n_beams = beams;
        py.detach(|| Translator::new(&self.model, &self.vocab).d2t(&record.inner, &beam)).map_err(to_py)
    }

    /// Generates `k` texts with sampled styles.
    #[pyo3(signature = (record, k, seed = 0, beams = 1))]
    fn d2t_diverse(&self, py: Python<'_>, record: &PyRecord, k: usize, seed: u64, beams: usize) -> PyResult<Vec<String>> {
        let mut beam = BeamConfig::d2t_default(self.model.config.max_len);
        beam.n_beams = beams;
        py.detach(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Translator::new(&self.model, &self.vocab).d2t_diverse(&record.inner, k, &beam, &mut rng)
        })
        .map_err(to_py)
    }

    /// Extracts a record from text; returns `(raw_output, record or None)`.
    #[pyo3(signature = (text, format, beams = 8))]
    fn t2d(&self, py: Python<'_>, text: &str, format: &str, beams: usize) -> PyResult<(String, Option<PyRecord>)> {
        let f = format_id(format)?;
        let mut beam = BeamConfig::t2d_default(self.model.config.max_len);
        beam.n_beams = beams;
        let out = py
            .detach(|| Translator::new(&self.model, &self.vocab).t2d(text, f, &beam))
            .map_err(to_py)?;
        Ok((out.raw, out.record.ok().map(|inner| PyRecord { inner })))
    }
}

/// Writes a synthetic corpus to `out` and returns the source names.
#[pyfunction]
#[pyo3(signature = (seed, out, n_texts = None, n_records = None, n_eval = None))]
fn gen_corpus(seed: u64, out: PathBuf, n_texts: Option<usize>, n_records: Option<usize>, n_eval: Option<usize>) -> PyResult<Vec<String>> {
    let mut world = WorldConfig::default();
    for s in &mut world.sources {
        s.n_texts = n_texts.unwrap_or(s.n_texts);
        s.n_records = n_records.unwrap_or(s.n_records);
        s.n_eval = n_eval.unwrap_or(s.n_eval);
    }
    let sources = corpus::generate_synthetic_world(seed, &world).map_err(to_py)?;
    corpus::write_corpus(&out, &sources).map_err(to_py)?;
    Ok(sources.into_iter().map(|s| s.name).collect())
}

/// Trains on a corpus directory and returns the checkpoint paths.
///
/// `model` and `train` are JSON objects overriding the default configs.
#[pyfunction]
#[pyo3(signature = (corpus_dir, out, model = None, train = None, supervised = false))]
fn train(
    py: Python<'_>,
    corpus_dir: PathBuf,
    out: PathBuf,
    model: Option<&str>,
    train: Option<&str>,
    supervised: bool,
) -> PyResult<Vec<PathBuf>> {
    let mc: ModelConfig = serde_json::from_str(model.unwrap_or("{}")).map_err(json_err)?;
    let tc: TrainConfig = serde_json::from_str(train.unwrap_or("{}")).map_err(json_err)?;
    py.detach(|| {
        let sources = corpus::read_corpus(&corpus_dir)?;
        let vocab = corpus::build_vocab(&sources, 1)?;
        let run = if supervised {
            training::train_supervised(&sources, vocab, mc, &tc, Some(&out), None)?
        } else {
            training::train(&sources, vocab, mc, &tc, Some(&out), None)?
        };
        Ok(run.checkpoints)
    })
    .map_err(to_py)
}

/// Evaluates a checkpoint on a corpus; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (ckpt, corpus_dir, greedy = true, max_pairs = None))]
fn evaluate(py: Python<'_>, ckpt: PathBuf, corpus_dir: PathBuf, greedy: bool, max_pairs: Option<usize>) -> PyResult<String> {
    py.detach(|| {
        let (model, vocab, _) = training::load_run(&ckpt)?;
        let sources = corpus::read_corpus(&corpus_dir)?;
        let ml = model.config.max_len;
        let mut opts = if greedy { EvalOptions::fast(ml) } else { EvalOptions::new(ml) };
        opts.max_pairs = max_pairs;
        let ev = experiment::evaluate(&model, &vocab, &sources, &opts)?;
        Ok(serde_json::to_string(&ev)?)
    })
    .map_err(to_py)
}

/// Converts a linearized record between formats.
#[pyfunction]
fn convert(text: &str, src: &str, dst: &str) -> PyResult<String> {
    PyRecord::parse(text, src)?.convert(dst)?.serialize()
}

/// Corpus BLEU-4 with one list of references per hypothesis.
#[pyfunction]
fn bleu(hypotheses: Vec<String>, references: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::bleu(&hypotheses, &references).map_err(to_py)
}

#[pyfunction]
fn rouge_l(hypothesis: &str, references: Vec<String>) -> f64 {
    metrics::rouge_l(hypothesis, &references)
}

#[pyfunction]
fn sembleu(pred: &PyRecord, gold: &PyRecord) -> f64 {
    metrics::sembleu(&pred.inner, &gold.inner)
}

#[pyfunction]
fn self_bleu(generations: Vec<String>) -> PyResult<f64> {
    metrics::self_bleu(&generations).map_err(to_py)
}

#[pyfunction]
fn distinct_n(generations: Vec<String>, n: usize) -> f64 {
    metrics::distinct_n(&generations, n)
}

/// Entity and relation `(precision, recall, f1)` of one prediction.
#[pyfunction]
fn entity_relation_prf(pred: &PyRecord, gold: &PyRecord) -> ((f64, f64, f64), (f64, f64, f64)) {
    let (e, r) = metrics::entity_relation_prf(&pred.inner, &gold.inner);
    ((e.precision, e.recall, e.f1), (r.precision, r.recall, r.f1))
}

#[pyfunction]
fn style_entropy_bound(d_style: usize) -> PyResult<f64> {
    cg_model::style_entropy_bound(d_style).map_err(to_py)
}

/// Finite-difference gradient check; returns the max relative error.
#[pyfunction]
#[pyo3(signature = (seed = 0, per_param = 4, h = 1e-5))]
fn gradient_check(py: Python<'_>, seed: u64, per_param: usize, h: f64) -> PyResult<f64> {
    py.detach(|| experiment::gradient_check(seed, per_param, h))
        .map(|r| r.max_rel_error)
        .map_err(to_py)
}

#[pymodule(name = "cyclegen")]
fn cyclegen_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRecord>()?;
    m.add_class::<PyModel>()?;
    m.add("FORMATS", FormatId::ALL.iter().map(|f| f.name()).collect::<Vec<_>>())?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(convert, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(sembleu, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(entity_relation_prf, m)?)?;
    m.add_function(wrap_pyfunction!(style_entropy_bound, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
