//! Python bindings: metrics, detection, alignment, models and the staged
//! pipeline.

use std::path::PathBuf;

use halluprobe::corpus::{detokenize, tokenize, TokenizerMode};
use halluprobe::hallucination;
use halluprobe::metrics::{self, BleuConfig, Smoothing};
use halluprobe::numerics::Tensor;
use halluprobe::pipeline::{self, PipelineError, Stage};
use halluprobe::probing;
use halluprobe::transformer::{average_checkpoints, beam_search, BeamParams, ModelScorer, TransformerModel};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(halluprobe, HalluprobeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    HalluprobeError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Config(msg) => PyValueError::new_err(msg),
        other => err(other),
    }
}

/// A sentence given either as whitespace-separated text or a token list.
#[derive(FromPyObject)]
enum Tokens {
    Text(String),
    List(Vec<String>),
}

impl Tokens {
    fn into_vec(self) -> Vec<String> {
        match self {
            Tokens::Text(s) => s.split_whitespace().map(str::to_string).collect(),
            Tokens::List(v) => v,
        }
    }
}

fn bleu_config(weights: Option<Vec<f64>>, brevity_penalty: bool, add_one: bool) -> BleuConfig {
    let cfg = weights.map_or_else(BleuConfig::standard, BleuConfig::new);
    let smoothing = if add_one { Smoothing::AddOne } else { Smoothing::None };
    cfg.with_brevity_penalty(brevity_penalty).with_smoothing(smoothing)
}

/// Sentence BLEU; uniform 1- to 4-gram weights unless `weights` is given.
#[pyfunction]
#[pyo3(signature = (hyp, reference, weights=None, brevity_penalty=true, add_one=false))]
fn bleu(hyp: Tokens, reference: Tokens, weights: Option<Vec<f64>>, brevity_penalty: bool, add_one: bool) -> PyResult<f64> {
    let cfg = bleu_config(weights, brevity_penalty, add_one);
    let score = metrics::bleu(&hyp.into_vec(), &reference.into_vec(), &cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(score.value)
}

/// Corpus BLEU from n-gram counts pooled over `(hyp, reference)` pairs.
#[pyfunction]
#[pyo3(signature = (pairs, weights=None, brevity_penalty=true))]
fn corpus_bleu(pairs: Vec<(Tokens, Tokens)>, weights: Option<Vec<f64>>, brevity_penalty: bool) -> PyResult<f64> {
    let cfg = bleu_config(weights, brevity_penalty, false);
    let owned: Vec<(Vec<String>, Vec<String>)> = pairs.into_iter().map(|(h, r)| (h.into_vec(), r.into_vec())).collect();
    let score = metrics::corpus_bleu(owned.iter().map(|(h, r)| (h.as_slice(), r.as_slice())), &cfg)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(score.value)
}

/// BLEU over 1- and 2-grams with equal weight.
#[pyfunction]
#[pyo3(signature = (hyp, reference, brevity_penalty=true))]
fn adjusted_bleu(hyp: Tokens, reference: Tokens, brevity_penalty: bool) -> f64 {
    metrics::adjusted_bleu_with(&hyp.into_vec(), &reference.into_vec(), brevity_penalty).value
}

/// `(correct, total)` over positions where the reference is not `pad`.
#[pyfunction]
#[pyo3(signature = (pred, reference, pad=0))]
fn word_accuracy(pred: Vec<u32>, reference: Vec<u32>, pad: u32) -> PyResult<(usize, usize)> {
    let a = metrics::word_accuracy(&pred, &reference, pad).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((a.correct, a.total))
}

#[pyfunction]
#[pyo3(signature = (score, threshold=0.01))]
fn is_hallucinated(score: f64, threshold: f64) -> bool {
    hallucination::is_hallucinated(score, threshold)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2().expect("matrix");
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

/// Softmax-weighted sum of cross-attention maps, each `T × S`.
#[pyfunction]
fn aggregate_alignment(maps: Vec<Vec<Vec<f64>>>, w: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let maps = maps.iter().map(|m| matrix(m)).collect::<PyResult<Vec<_>>>()?;
    let a = probing::aggregate_alignment(&maps, &w).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(rows(&a))
}

/// Layer list such as `"emb,1..2"`; the embedding layer is 0.
#[pyfunction]
fn parse_layers(text: &str) -> PyResult<Vec<usize>> {
    pipeline::parse_layers(text).map_err(pipeline_err)
}

#[pyclass(module = "halluprobe", from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: pipeline::RunConfig,
}

#[pymethods]
impl RunConfig {
    /// The bundled desk-scale config.
    #[staticmethod]
    fn bundled() -> Self {
        Self {
            inner: pipeline::RunConfig::bundled(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::RunConfig::from_toml(text).map_err(pipeline_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::RunConfig::load(&path).map_err(pipeline_err)?,
        })
    }

    /// A copy with `KEY=VALUE` overrides applied, e.g. `"train.steps=100"`.
    fn with_overrides(&self, sets: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_overrides(&sets).map_err(pipeline_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
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
    fn out(&self) -> PathBuf {
        self.inner.paths.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.inner.paths.out = out;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, out={:?})", self.inner.seed, self.inner.paths.out)
    }
}

#[pyclass(module = "halluprobe")]
struct Model {
    inner: TransformerModel<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TransformerModel::load(&path).map_err(err)?,
        })
    }

    /// Elementwise mean of checkpoint files.
    #[staticmethod]
    fn average(paths: Vec<PathBuf>) -> PyResult<Self> {
        Ok(Self {
            inner: average_checkpoints(&paths).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, Default::default()).map_err(err)
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.layout().param_count()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.config();
        let d = PyDict::new(py);
        d.set_item("n_enc_layers", c.n_enc_layers)?;
        d.set_item("n_dec_layers", c.n_dec_layers)?;
        d.set_item("n_heads", c.n_heads)?;
        d.set_item("d_model", c.d_model)?;
        d.set_item("d_ffn", c.d_ffn)?;
        d.set_item("vocab_size", c.vocab_size)?;
        d.set_item("max_len", c.max_len)?;
        d.set_item("dropout", c.dropout)?;
        Ok(d)
    }

    /// Next-token logits for every position of `prefix`.
    fn forward(&self, source: Vec<u32>, prefix: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.forward(&source, &prefix, false).map_err(err)?;
        Ok(rows(&out.logits.cast()))
    }

    /// Beam-decodes token ids; the result ends with eos.
    #[pyo3(signature = (source, beam_size=4, max_len=None, length_penalty=0.6))]
    fn translate(&self, source: Vec<u32>, beam_size: usize, max_len: Option<usize>, length_penalty: f64) -> PyResult<Vec<u32>> {
        let params = BeamParams {
            beam_size,
            max_len: max_len.unwrap_or(self.inner.config().max_len),
            length_penalty,
            ..BeamParams::default()
        };
        let scorer = ModelScorer::new(&self.inner, &source).map_err(err)?;
        Ok(beam_search(&scorer, &params).map_err(err)?.tokens)
    }
}

fn stage(name: &str) -> PyResult<Stage> {
    Stage::ALL
        .into_iter()
        .find(|s| s.command() == name || s.dir() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown stage {name:?}")))
}

#[pyclass(module = "halluprobe")]
struct Pipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    fn new(config: RunConfig) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::Pipeline::new(config.inner).map_err(pipeline_err)?,
        })
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root().to_path_buf()
    }

    /// Runs one stage by command or directory name and returns the files
    /// it wrote.
    fn run(&self, py: Python<'_>, name: &str) -> PyResult<Vec<String>> {
        let s = stage(name)?;
        let m = py.detach(|| self.inner.run_stage(s)).map_err(pipeline_err)?;
        Ok(m.outputs.into_keys().collect())
    }

    /// Runs every stage that is not up to date.
    fn run_all(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        let ms = py.detach(|| self.inner.run_all()).map_err(pipeline_err)?;
        Ok(ms.iter().map(|m| m.stage.to_string()).collect())
    }

    fn is_current(&self, name: &str) -> PyResult<bool> {
        Ok(self.inner.is_current(stage(name)?))
    }

    fn model(&self) -> PyResult<Model> {
        Ok(Model {
            inner: self.inner.model().map_err(pipeline_err)?,
        })
    }

    /// Translates source sentences with the trained model.
    fn translate(&self, lines: Vec<String>) -> PyResult<Vec<String>> {
        let vocab = self.inner.vocab().map_err(pipeline_err)?;
        let model = self.inner.model().map_err(pipeline_err)?;
        let params = self.inner.config().beam.clone();
        lines
            .iter()
            .map(|line| {
                let ids = tokenize(line, &vocab, &TokenizerMode::Word).map_err(err)?;
                let scorer = ModelScorer::new(&model, &ids).map_err(err)?;
                let out = beam_search(&scorer, &params).map_err(err)?;
                Ok(detokenize(&out.tokens, &vocab))
            })
            .collect()
    }
}

#[pymodule]
#[pyo3(name = "halluprobe")]
fn halluprobe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HalluprobeError", m.py().get_type::<HalluprobeError>())?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(word_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(is_hallucinated, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(parse_layers, m)?)?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Model>()?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
