//! Natural hallucination detection: a pair is hallucinated when the
//! adjusted BLEU of the model's beam output against the reference falls
//! strictly below a threshold.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, BOS, EOS, PAD};
use crate::metrics::adjusted_bleu_with;
use crate::transformer::{beam_search, BeamParams, ModelScorer, TransformerError, TransformerModel};

pub const DEFAULT_THRESHOLD: f64 = 0.01;
/// Version tag written into detection files.
pub const DETECTION_FORMAT: &str = "halluprobe-detection/1";

#[derive(Debug, thiserror::Error)]
pub enum HallucinationError {
    #[error("detection needs a non-empty corpus")]
    EmptyCorpus,
    #[error("detection needs a frozen model")]
    NotFrozen,
    #[error("no scripted translation for source {0:?}")]
    Unscripted(Vec<u32>),
    #[error("detection result covers {result} pairs of {result_split:?}, corpus has {corpus} pairs of {corpus_split:?}")]
    Mismatch {
        result: usize,
        result_split: String,
        corpus: usize,
        corpus_split: String,
    },
    #[error("invalid threshold {0}")]
    Threshold(f64),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed detection file: {0}")]
    Format(String),
}

type Result<T> = std::result::Result<T, HallucinationError>;

/// Anything that maps a source sentence to output token ids.
pub trait Translator {
    fn translate(&self, source: &[u32]) -> Result<Vec<u32>>;
}

/// Beam-search decoding with a frozen model.
pub struct BeamTranslator<'a> {
    model: &'a TransformerModel<f32>,
    params: BeamParams,
}

impl<'a> BeamTranslator<'a> {
    pub fn new(model: &'a TransformerModel<f32>, params: BeamParams) -> Result<Self> {
        if !model.is_frozen() {
            return Err(HallucinationError::NotFrozen);
        }
        Ok(Self { model, params })
    }
}

impl Translator for BeamTranslator<'_> {
    fn translate(&self, source: &[u32]) -> Result<Vec<u32>> {
        let scorer = ModelScorer::new(self.model, source)?;
        Ok(beam_search(&scorer, &self.params)?.tokens)
    }
}

/// Returns fixed outputs per source sentence; for testing detection
/// independently of model quality.
#[derive(Clone, Debug, Default)]
pub struct ScriptedTranslator {
    outputs: HashMap<Vec<u32>, Vec<u32>>,
}

impl ScriptedTranslator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script(&mut self, source: Vec<u32>, output: Vec<u32>) -> &mut Self {
        self.outputs.insert(source, output);
        self
    }
}

impl Translator for ScriptedTranslator {
    fn translate(&self, source: &[u32]) -> Result<Vec<u32>> {
        self.outputs
            .get(source)
            .cloned()
            .ok_or_else(|| HallucinationError::Unscripted(source.to_vec()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub threshold: f64,
    /// Apply the brevity penalty inside adjusted BLEU.
    pub brevity_penalty: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            brevity_penalty: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub index: usize,
    pub source: Vec<u32>,
    pub reference: Vec<u32>,
    pub output: Vec<u32>,
    pub adjusted_bleu: f64,
    pub hallucinated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub split: String,
    pub threshold: f64,
    pub records: Vec<DetectionRecord>,
}

/// Aggregate view written next to the per-pair records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub format: String,
    pub split: String,
    pub threshold: f64,
    pub hallucinated: usize,
    pub total: usize,
    /// `"X/Y"`: X of Y pairs flagged.
    pub stats: String,
    pub indices: Vec<usize>,
}

fn words(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| t != PAD && t != BOS && t != EOS).collect()
}

/// Strict comparison: a score equal to the threshold is not flagged.
pub fn is_hallucinated(score: f64, threshold: f64) -> bool {
    score < threshold
}

/// Decodes every pair and flags those whose adjusted BLEU against the
/// reference is below the threshold. Special tokens are removed before
/// scoring.
pub fn detect(translator: &dyn Translator, corpus: &CorpusSplit, cfg: &DetectConfig) -> Result<DetectionResult> {
    if corpus.is_empty() {
        return Err(HallucinationError::EmptyCorpus);
    }
    if !cfg.threshold.is_finite() {
        return Err(HallucinationError::Threshold(cfg.threshold));
    }
    let records = corpus
        .pairs()
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let output = translator.translate(&p.source)?;
            let score = adjusted_bleu_with(&words(&output), &words(&p.target), cfg.brevity_penalty).value;
            Ok(DetectionRecord {
                index,
                source: p.source.clone(),
                reference: p.target.clone(),
                output,
                adjusted_bleu: score,
                hallucinated: is_hallucinated(score, cfg.threshold),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DetectionResult {
        split: corpus.label(),
        threshold: cfg.threshold,
        records,
    })
}

impl DetectionResult {
    /// Indices of flagged pairs, ascending.
    pub fn hallucinated(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.hallucinated).map(|r| r.index).collect()
    }

    pub fn count(&self) -> usize {
        self.records.iter().filter(|r| r.hallucinated).count()
    }

    pub fn total(&self) -> usize {
        self.records.len()
    }

    /// `"X/Y"` with X flagged pairs out of Y.
    pub fn stats(&self) -> String {
        format!("{}/{}", self.count(), self.total())
    }

    pub fn summary(&self) -> DetectionSummary {
        DetectionSummary {
            format: DETECTION_FORMAT.into(),
            split: self.split.clone(),
            threshold: self.threshold,
            hallucinated: self.count(),
            total: self.total(),
            stats: self.stats(),
            indices: self.hallucinated(),
        }
    }

    /// One line per pair: index, score to 6 decimals, flag and the output
    /// token ids.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# {DETECTION_FORMAT} split={} threshold={}\nindex\tadjusted_bleu\thallucinated\toutput\n", self.split, self.threshold);
        for r in &self.records {
            let out: Vec<String> = r.output.iter().map(u32::to_string).collect();
            let _ = writeln!(s, "{}\t{:.6}\t{}\t{}", r.index, r.adjusted_bleu, u8::from(r.hallucinated), out.join(" "));
        }
        s
    }

    /// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let tsv = dir.join(format!("{stem}.tsv"));
        let json = dir.join(format!("{stem}.json"));
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| HallucinationError::Io { path, source }
        };
        std::fs::write(&tsv, self.to_tsv()).map_err(io(&tsv))?;
        let body = serde_json::to_string_pretty(&self.summary()).expect("summary serializes") + "\n";
        std::fs::write(&json, body).map_err(io(&json))?;
        Ok((tsv, json))
    }
}

impl DetectionSummary {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HallucinationError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let s: Self = serde_json::from_str(&text).map_err(|e| HallucinationError::Format(e.to_string()))?;
        if s.format != DETECTION_FORMAT {
            return Err(HallucinationError::Format(format!("unsupported format {:?}", s.format)));
        }
        Ok(s)
    }
}

/// The whole corpus next to its flagged subset.
pub fn split_all_vs_hallu(corpus: &CorpusSplit, result: &DetectionResult) -> Result<(CorpusSplit, CorpusSplit)> {
    let consistent = result.total() == corpus.len()
        && result.split == corpus.label()
        && result
            .records
            .iter()
            .zip(corpus.pairs())
            .all(|(r, p)| r.source == p.source && r.reference == p.target);
    if !consistent {
        return Err(HallucinationError::Mismatch {
            result: result.total(),
            result_split: result.split.clone(),
            corpus: corpus.len(),
            corpus_split: corpus.label(),
        });
    }
    Ok((corpus.clone(), corpus.subset(&result.hallucinated())))
}
