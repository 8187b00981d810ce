//! Python bindings for the `crosslm` simulator.
//!
//! The pipeline commands take a `RunConfig` and a run directory, like the
//! command-line tool. Models, the filter and the partitioner are exposed
//! as small classes and functions for interactive inspection.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use crosslm::checkpoint;
use crosslm::classifier::{self, ClassifierArch, ClassifierKind, ClassifierParams};
use crosslm::config::{GradcheckConfig, Mode, Precision};
use crosslm::data::{self, LabeledExample};
use crosslm::eval::{self, EvalReport};
use crosslm::experiment;
use crosslm::filter::{self, EmbedTable, FilterConfig};
use crosslm::gradcheck;
use crosslm::lm::{self, LmArch, LmParams, Span};
use crosslm::rng::seeded;
use crosslm::sampling::{self, SamplingConfig};
use crosslm::transfer::SyntheticSample;
use crosslm::vocab::{Role, TokenSeq};

create_exception!(pycrosslm, CrossLMError, PyException, "Error raised by the simulator.");

fn py_err(e: crosslm::Error) -> PyErr {
    match e {
        crosslm::Error::Config(msg) => PyValueError::new_err(msg),
        other => CrossLMError::new_err(format!("{other} (exit code {})", other.exit_code())),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for crosslm::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_mode(name: &str) -> PyResult<Mode> {
    Mode::ALL
        .into_iter()
        .find(|m| m.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown mode `{name}`")))
}

/// Full run configuration. Unset fields take their defaults.
#[pyclass(module = "pycrosslm")]
struct RunConfig {
    inner: crosslm::config::RunConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (seed=1))]
    fn new(seed: u64) -> Self {
        Self {
            inner: crosslm::config::RunConfig::with_seed(seed),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = crosslm::config::RunConfig::from_json(text).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = crosslm::config::RunConfig::load(&path).py()?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Hex digest identifying the configuration.
    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn modes(&self) -> Vec<String> {
        self.inner.modes.iter().map(|m| m.name().to_string()).collect()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, hash={})", self.inner.seed, &self.inner.hash()[..12])
    }
}

/// Metrics of a finished run.
#[pyclass(module = "pycrosslm", frozen)]
struct Report {
    inner: EvalReport,
}

#[pymethods]
impl Report {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn ppl_before(&self) -> f64 {
        self.inner.ppl_before
    }

    #[getter]
    fn llm_nlu_before(&self) -> f64 {
        self.inner.llm_nlu_before
    }

    #[getter]
    fn bayes_ceiling(&self) -> f64 {
        self.inner.bayes_ceiling
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    /// Scalar metrics per mode.
    fn modes(&self) -> BTreeMap<String, BTreeMap<&'static str, f64>> {
        self.inner
            .modes
            .iter()
            .map(|(name, m)| {
                let fields = BTreeMap::from([
                    ("slm_accuracy", m.slm_accuracy_mean),
                    ("local_accuracy", m.local_accuracy_mean),
                    ("llm_nlu", m.llm_nlu),
                    ("llm_nlg_pre", m.llm_nlg_pre),
                    ("llm_nlg", m.llm_nlg),
                    ("perplexity", m.perplexity),
                ]);
                (name.clone(), fields)
            })
            .collect()
    }

    fn table(&self) -> String {
        self.inner.table()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| CrossLMError::new_err(e.to_string()))
    }
}

#[pyfunction]
#[pyo3(signature = (config, run_dir, force=false))]
fn gen_data(py: Python<'_>, config: &RunConfig, run_dir: PathBuf, force: bool) -> PyResult<String> {
    let cfg = config.inner.clone();
    let dir = py.detach(|| experiment::cmd_gen_data(&cfg, Some(&run_dir), force)).py()?;
    Ok(dir.root().display().to_string())
}

/// Pre-trains the language model; returns its held-out perplexity.
#[pyfunction]
fn pretrain(py: Python<'_>, config: &RunConfig, run_dir: PathBuf) -> PyResult<f64> {
    let cfg = config.inner.clone();
    py.detach(|| experiment::cmd_pretrain(&cfg, Some(&run_dir))).py()
}

#[pyfunction]
fn run_mode(py: Python<'_>, config: &RunConfig, run_dir: PathBuf, mode: &str) -> PyResult<()> {
    let (cfg, mode) = (config.inner.clone(), parse_mode(mode)?);
    py.detach(|| experiment::cmd_run(&cfg, Some(&run_dir), mode)).py()
}

#[pyfunction]
fn evaluate(py: Python<'_>, config: &RunConfig, run_dir: PathBuf) -> PyResult<Report> {
    let cfg = config.inner.clone();
    let inner = py.detach(|| experiment::cmd_eval(&cfg, Some(&run_dir))).py()?;
    Ok(Report { inner })
}

/// Every pipeline step for every configured mode.
#[pyfunction]
#[pyo3(signature = (config, run_dir, force=false))]
fn run_all(py: Python<'_>, config: &RunConfig, run_dir: PathBuf, force: bool) -> PyResult<Report> {
    let cfg = config.inner.clone();
    let inner = py.detach(|| experiment::run_all(&cfg, Some(&run_dir), force)).py()?;
    Ok(Report { inner })
}

/// Returns `(passed, summary)`.
#[pyfunction]
#[pyo3(signature = (precision="both"))]
fn run_gradcheck(py: Python<'_>, precision: &str) -> PyResult<(bool, String)> {
    let precision = match precision {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        "both" => Precision::Both,
        other => return Err(PyValueError::new_err(format!("unknown precision `{other}`"))),
    };
    let cfg = GradcheckConfig {
        precision,
        ..GradcheckConfig::default()
    };
    let r = py.detach(|| gradcheck::run_gradcheck(&cfg, None)).py()?;
    Ok((r.passed(), r.summary()))
}

/// Decoder-only language model.
#[pyclass(module = "pycrosslm")]
struct LanguageModel {
    inner: LmParams<f32>,
}

#[pymethods]
impl LanguageModel {
    #[new]
    #[pyo3(signature = (vocab, layers=2, d_model=64, heads=2, context=64, seed=0))]
    fn new(vocab: usize, layers: usize, d_model: usize, heads: usize, context: usize, seed: u64) -> PyResult<Self> {
        let arch = LmArch::new(vocab, layers, d_model, heads, context);
        let inner = LmParams::init(arch, &mut seeded(seed)).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_lm(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_lm(&path, &self.inner).py()
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.arch.vocab
    }

    #[getter]
    fn context(&self) -> usize {
        self.inner.arch.context
    }

    fn hash(&self) -> String {
        checkpoint::hash_params(&self.inner.tensors)
    }

    /// Sum of next-token log-probabilities over positions 1..len.
    fn log_prob(&self, ids: Vec<usize>) -> PyResult<f64> {
        lm::sequence_log_prob(&self.inner, &TokenSeq::raw(ids), Span::All).py()
    }

    fn next_distribution(&self, ids: Vec<usize>) -> PyResult<Vec<f64>> {
        lm::next_dist(&self.inner, &TokenSeq::raw(ids)).py()
    }

    fn perplexity(&self, lines: Vec<Vec<usize>>) -> PyResult<f64> {
        let lines: Vec<TokenSeq> = lines.into_iter().map(TokenSeq::raw).collect();
        eval::perplexity(&self.inner, &lines).py()
    }

    /// Continues `prompt` with nucleus sampling; returns the new tokens.
    #[pyo3(signature = (prompt, seed=0, max_len=24, top_p=0.9, temperature=1.0))]
    fn sample(&self, prompt: Vec<usize>, seed: u64, max_len: usize, top_p: f64, temperature: f64) -> PyResult<Vec<usize>> {
        let cfg = SamplingConfig {
            p: top_p,
            temperature,
            max_len,
            ..SamplingConfig::default()
        };
        cfg.validate(self.inner.arch.context).py()?;
        let seq = sampling::sample(&self.inner, &TokenSeq::prompt(prompt), &cfg, &mut seeded(seed)).py()?;
        Ok(seq.span(Role::Completion).into_iter().map(|i| seq.ids[i]).collect())
    }
}

/// Bag-of-embeddings text classifier.
#[pyclass(module = "pycrosslm")]
struct Classifier {
    inner: ClassifierParams<f32>,
}

#[pymethods]
impl Classifier {
    #[new]
    #[pyo3(signature = (vocab, classes=2, kind="tiny", seed=0))]
    fn new(vocab: usize, classes: usize, kind: &str, seed: u64) -> PyResult<Self> {
        let kind = match kind.to_lowercase().as_str() {
            "tiny" => ClassifierKind::Tiny,
            "small" => ClassifierKind::Small,
            other => return Err(PyValueError::new_err(format!("unknown classifier kind `{other}`"))),
        };
        let arch = ClassifierArch::new(kind, vocab, classes);
        let inner = ClassifierParams::init_with(arch, 0.02, true, &mut seeded(seed)).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_classifier(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_classifier(&path, &self.inner).py()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.arch.classes
    }

    fn probs(&self, ids: Vec<usize>) -> PyResult<Vec<f64>> {
        classifier::probs(&self.inner, &ids).py()
    }

    fn predict(&self, ids: Vec<usize>) -> PyResult<usize> {
        classifier::predict(&self.inner, &ids).py()
    }

    /// `2·P(label | ids) − 1`.
    fn reward(&self, ids: Vec<usize>, label: usize) -> PyResult<f64> {
        let p = classifier::probs(&self.inner, &ids).py()?;
        let q = p
            .get(label)
            .ok_or_else(|| PyValueError::new_err(format!("label {label} out of range")))?;
        Ok((2.0 * q - 1.0).clamp(-1.0, 1.0))
    }

    fn accuracy(&self, examples: Vec<(Vec<usize>, usize)>) -> PyResult<f64> {
        let test: Vec<LabeledExample> = examples
            .into_iter()
            .map(|(ids, y)| LabeledExample { x: TokenSeq::raw(ids), y })
            .collect();
        eval::eval_slm_accuracy(&self.inner, &test).py()
    }
}

fn batch(sentences: Vec<Vec<usize>>, rewards: Option<Vec<f64>>) -> PyResult<Vec<SyntheticSample>> {
    if let Some(r) = &rewards {
        if r.len() != sentences.len() {
            return Err(PyValueError::new_err("rewards and sentences differ in length"));
        }
    }
    sentences
        .into_iter()
        .enumerate()
        .map(|(i, ids)| {
            if ids.is_empty() {
                return Err(PyValueError::new_err(format!("sentence {i} is empty")));
            }
            Ok(SyntheticSample {
                label: 0,
                x: TokenSeq::raw(ids.clone()),
                full_gen: TokenSeq::tagged(ids, Role::Completion),
                reward: rewards.as_ref().map(|r| r[i]),
                diversity: None,
                score: None,
            })
        })
        .collect()
}

/// `1 − max cosine similarity` per sentence under a row-major embedding table.
#[pyfunction]
fn diversity_scores(sentences: Vec<Vec<usize>>, table: Vec<f64>, dim: usize) -> PyResult<Vec<f64>> {
    let table = EmbedTable::from_rows(dim, table).py()?;
    let mut b = batch(sentences, None)?;
    filter::diversity_scores(&mut b, &table).py()?;
    Ok(b.iter().filter_map(|s| s.diversity).collect())
}

/// Indices of the top `⌈α·n/100⌉` samples by `reward · diversity`.
#[pyfunction]
#[pyo3(signature = (rewards, diversity, alpha_percent=25.0))]
fn select(rewards: Vec<f64>, diversity: Vec<f64>, alpha_percent: f64) -> PyResult<Vec<usize>> {
    if rewards.len() != diversity.len() {
        return Err(PyValueError::new_err("rewards and diversity differ in length"));
    }
    let mut b = batch(vec![vec![0]; rewards.len()], Some(rewards))?;
    for (s, d) in b.iter_mut().zip(diversity) {
        s.diversity = Some(d);
    }
    let cfg = FilterConfig {
        alpha_percent,
        ..FilterConfig::default()
    };
    filter::score_and_select(&mut b, &cfg).py()
}

/// Label-skewed split of example indices across clients.
#[pyfunction]
#[pyo3(signature = (labels, clients, beta=1.0, seed=0))]
fn dirichlet_partition(labels: Vec<usize>, clients: usize, beta: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let train: Vec<LabeledExample> = labels
        .into_iter()
        .map(|y| LabeledExample { x: TokenSeq::raw(vec![]), y })
        .collect();
    let shards = data::dirichlet_partition(&train, classes, clients, beta, &mut seeded(seed)).py()?;
    Ok(shards.into_iter().map(|s| s.indices).collect())
}

#[pymodule]
fn pycrosslm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CrossLMError", m.py().get_type::<CrossLMError>())?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Report>()?;
    m.add_class::<LanguageModel>()?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(run_mode, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_scores, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    Ok(())
}
