//! Python bindings: tokenizer, transformations, packing, metrics and the
//! experiment harness.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use alignlab_core::corpus::{Corpus, Language, Sentence};
use alignlab_core::harness;
use alignlab_core::instances::{self, TrainingInstance};
use alignlab_core::metrics;
use alignlab_core::model::Tensor;
use alignlab_core::objectives;
use alignlab_core::tasks;
use alignlab_core::tokenizer::{self, BilingualDictionary, BpeModel};
use alignlab_core::transform::{self, TransformSpec};
use alignlab_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn sentence(words: Vec<String>) -> PyResult<Sentence> {
    Sentence::new(words).map_err(py_err)
}

fn language(id: u32) -> PyResult<Language> {
    Language::from_id(id).ok_or_else(|| PyValueError::new_err(format!("language must be 0 or 1, got {id}")))
}

fn table(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("embedding rows differ in length"));
    }
    let n = rows.len();
    Ok(Tensor::from_vec(n, cols, rows.into_iter().flatten().collect()))
}

/// Shared BPE tokenizer over both languages.
#[pyclass(name = "Tokenizer", module = "alignlab")]
struct PyTokenizer {
    inner: BpeModel,
}

#[pymethods]
impl PyTokenizer {
    /// Trains on corpora given as lists of sentences (lists of words).
    #[staticmethod]
    fn train(corpora: Vec<Vec<Vec<String>>>, vocab_size: usize) -> PyResult<Self> {
        let corpora = corpora
            .into_iter()
            .map(|c| Ok(Corpus::from_sentences(c.into_iter().map(sentence).collect::<PyResult<_>>()?, Language::Original)))
            .collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&Corpus> = corpora.iter().collect();
        Ok(PyTokenizer { inner: tokenizer::train_bpe(&refs, vocab_size).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(merges: PathBuf, vocab: PathBuf) -> PyResult<Self> {
        Ok(PyTokenizer { inner: BpeModel::read(&merges, &vocab).map_err(py_err)? })
    }

    fn save(&self, merges: PathBuf, vocab: PathBuf) -> PyResult<()> {
        self.inner.write(&merges, &vocab).map_err(py_err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn merges(&self) -> Vec<(String, String)> {
        self.inner.merges().to_vec()
    }

    fn encode(&self, words: Vec<String>) -> Vec<u32> {
        self.inner.encode(&words)
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        self.inner.encode_word(word)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<Vec<String>> {
        self.inner.decode(&ids).map_err(py_err)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }
}

/// A transformation such as `"Trans+Inv"` with its script map.
#[pyclass(name = "Transformer", module = "alignlab")]
struct PyTransformer {
    inner: transform::Transformer,
}

#[pymethods]
impl PyTransformer {
    #[new]
    fn new(spec: &str, vocabulary: Vec<String>) -> PyResult<Self> {
        let spec: TransformSpec = spec.parse().map_err(py_err)?;
        Ok(PyTransformer { inner: transform::Transformer::new(spec, &vocabulary).map_err(py_err)? })
    }

    #[getter]
    fn spec(&self) -> String {
        self.inner.spec.to_string()
    }

    /// Transformed words and `order`, where `order[new] = old`.
    #[pyo3(signature = (words, index = 0))]
    fn sentence(&self, words: Vec<String>, index: u64) -> PyResult<(Vec<String>, Vec<usize>)> {
        let (s, order) = self.inner.sentence(&sentence(words)?, index).map_err(py_err)?;
        Ok((s.into_words(), order))
    }

    /// Transforms a tagged sentence, repairing BIO tags.
    #[pyo3(signature = (words, tags, index = 0))]
    fn tagged(&self, words: Vec<String>, tags: Vec<String>, index: u64) -> PyResult<(Vec<String>, Vec<String>)> {
        let rec = alignlab_core::corpus::LabeledSentence::tagged(sentence(words)?, tags).map_err(py_err)?;
        let out = self.inner.labeled(&rec, index).map_err(py_err)?;
        Ok((out.sentence.into_words(), out.tags.unwrap_or_default()))
    }

    fn script_map(&self) -> BTreeMap<String, String> {
        self.inner.script_map.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }
}

fn instance_dict(x: &TrainingInstance) -> BTreeMap<&'static str, Vec<u32>> {
    BTreeMap::from([
        ("token_ids", x.token_ids.clone()),
        ("position_ids", x.position_ids.clone()),
        ("language_ids", x.language_ids.clone()),
        ("mlm_labels", x.mlm_labels.clone()),
    ])
}

type PackedDicts = (Vec<BTreeMap<&'static str, Vec<u32>>>, usize);

/// Packs token sequences into instances of length `h`; returns the
/// instances and the number of dropped sentences.
#[pyfunction]
#[pyo3(signature = (sentences, h, language = 0))]
fn pack_mono(sentences: Vec<Vec<u32>>, h: usize, language: u32) -> PyResult<PackedDicts> {
    let p = instances::pack_mono(&sentences, h, self::language(language)?);
    Ok((p.instances.iter().map(instance_dict).collect(), p.dropped))
}

/// Packs parallel pairs as `[L1, pad to h/2, L2, pad to h]`.
#[pyfunction]
fn pack_tlm(pairs: Vec<(Vec<u32>, Vec<u32>)>, h: usize) -> PyResult<PackedDicts> {
    let p = instances::pack_tlm(&pairs, h).map_err(py_err)?;
    Ok((p.instances.iter().map(instance_dict).collect(), p.dropped))
}

#[pyfunction]
fn invert(words: Vec<String>) -> PyResult<Vec<String>> {
    Ok(transform::invert(&sentence(words)?).into_words())
}

#[pyfunction]
fn derive_word(word: &str) -> String {
    transform::derive_word(word)
}

#[pyfunction]
fn repair_bio(tags: Vec<String>, order: Vec<usize>) -> PyResult<Vec<String>> {
    if order.len() != tags.len() || order.iter().any(|&i| i >= tags.len()) {
        return Err(PyValueError::new_err("order must be a permutation of the tag positions"));
    }
    Ok(transform::repair_bio(&tags, &order))
}

#[pyfunction]
fn is_valid_bio(tags: Vec<String>) -> bool {
    transform::is_valid_bio(&tags)
}

/// `−mean cos(E[a], E[b])` over `pairs`.
#[pyfunction]
fn loss_align(embeddings: Vec<Vec<f64>>, pairs: Vec<(u32, u32)>) -> PyResult<f64> {
    let e = table(embeddings)?;
    let dict = BilingualDictionary::new(pairs, e.rows).map_err(py_err)?;
    objectives::loss_align(&e, &dict).map_err(py_err)
}

/// Alignment score in percent and the per-token indicators.
#[pyfunction]
fn alignment_score(l1: Vec<Vec<f64>>, l2: Vec<Vec<f64>>, correspondence: Vec<(usize, usize)>) -> PyResult<(f64, Vec<f64>)> {
    let r = metrics::alignment_score(&table(l1)?, &table(l2)?, &correspondence).map_err(py_err)?;
    Ok((r.mean, r.indicators))
}

/// Spearman's ρ and its two-tailed p-value.
#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64)> {
    metrics::spearman(&xs, &ys).map_err(py_err)
}

/// Span-level precision, recall and F1 of BIO taggings.
#[pyfunction]
fn span_f1(preds: Vec<Vec<String>>, golds: Vec<Vec<String>>) -> PyResult<(f64, f64, f64)> {
    let f = metrics::span_f1(&preds, &golds).map_err(py_err)?;
    Ok((f.precision, f.recall, f.f1))
}

#[pyfunction]
fn transfer_delta(b_s: f64, b_z: f64) -> f64 {
    metrics::transfer_delta("", b_s, b_z).delta
}

/// Sentences of the synthetic grammar.
#[pyfunction]
fn generate_corpus(n: usize, seed: u64) -> PyResult<Vec<Vec<String>>> {
    let c = tasks::generate_corpus(n, seed).map_err(py_err)?;
    Ok(c.sentences().map(|s| s.words().to_vec()).collect())
}

/// Experiment configuration; see `desk`, `tiny` and `from_toml`.
#[pyclass(name = "ExperimentConfig", module = "alignlab")]
struct PyConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn desk(output_dir: PathBuf) -> Self {
        PyConfig { inner: harness::ExperimentConfig::desk(output_dir) }
    }

    #[staticmethod]
    fn tiny(output_dir: PathBuf) -> Self {
        PyConfig { inner: harness::ExperimentConfig::tiny(output_dir) }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: harness::ExperimentConfig::from_toml(text).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: harness::ExperimentConfig::load(&path).map_err(py_err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.train.total_steps
    }

    #[setter]
    fn set_total_steps(&mut self, steps: u64) -> PyResult<()> {
        let mut cfg = self.inner.clone();
        cfg.train.total_steps = steps;
        cfg.validate().map_err(py_err)?;
        self.inner = cfg;
        Ok(())
    }
}

type ReportDict = (Vec<PathBuf>, BTreeMap<String, Option<f64>>);

fn report_summary(r: harness::Report) -> ReportDict {
    let rho = r.correlations.into_iter().map(|(task, c)| (task, c.rho)).collect();
    (r.files, rho)
}

/// Runs the whole grid; returns the report files and ρ_s(alignment, −Δ)
/// per task.
#[pyfunction]
fn run_grid(py: Python<'_>, config: &PyConfig) -> PyResult<ReportDict> {
    let cfg = config.inner.clone();
    py.detach(|| harness::run_grid(&cfg)).map(report_summary).map_err(py_err)
}

/// Builds the report from a rows CSV into `out_dir`.
#[pyfunction]
fn report_from_rows(rows: PathBuf, out_dir: PathBuf) -> PyResult<ReportDict> {
    let rows = harness::read_rows(&rows).map_err(py_err)?;
    harness::write_report(&rows, &BTreeSet::new(), &out_dir).map(report_summary).map_err(py_err)
}

#[pymodule(name = "alignlab")]
fn alignlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyTransformer>()?;
    m.add_class::<PyConfig>()?;
    m.add("PAD_INDEX", instances::PAD_INDEX)?;
    m.add("IGNORE", instances::IGNORE)?;
    m.add_function(wrap_pyfunction!(pack_mono, m)?)?;
    m.add_function(wrap_pyfunction!(pack_tlm, m)?)?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(derive_word, m)?)?;
    m.add_function(wrap_pyfunction!(repair_bio, m)?)?;
    m.add_function(wrap_pyfunction!(is_valid_bio, m)?)?;
    m.add_function(wrap_pyfunction!(loss_align, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_score, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(span_f1, m)?)?;
    m.add_function(wrap_pyfunction!(transfer_delta, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add_function(wrap_pyfunction!(report_from_rows, m)?)?;
    Ok(())
}
