use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{PipelineError, Result};
use crate::corpus::{DomainParams, GeneratorSpec, LexiconSpec, SplitSizes, DEFAULT_MAX_LEN};
use crate::hallucination::{DetectConfig, DEFAULT_THRESHOLD};
use crate::probing::{EncoderState, HeadKind, ProbeSuiteConfig, ProbeTrainConfig};
use crate::report::{ReportSpec, RunMeta, TableId};
use crate::transformer::{BeamParams, DecoderVariant, ModelConfig, TrainConfig};

/// Text of the bundled desk-scale configuration.
pub const BUNDLED_CONFIG: &str = include_str!("../../configs/bundled.toml");

/// Split names the pipeline knows, in corpus order.
pub const SPLITS: [&str; 4] = ["train", "valid", "test_in", "test_out"];

/// Everything that determines a run. The single `seed` feeds every random
/// stream; sections carry no seeds of their own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub beam: BeamParams,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// Not part of the config hash: moving a run elsewhere changes no artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: PathBuf::from("run") }
    }
}

/// Generator parameters; the seed comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub lexicon: LexiconSpec,
    pub sizes: SplitSizes,
    pub in_domain: DomainParams,
    #[serde(default)]
    pub out_domain: Option<DomainParams>,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

/// Model shape; the vocabulary size and maximum length follow the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            n_enc_layers: d.n_enc_layers,
            n_dec_layers: d.n_dec_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_ffn: d.d_ffn,
            dropout: d.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_tokens: usize,
    pub lr: f64,
    pub warmup: u64,
    pub label_smoothing: f64,
    pub checkpoint_every: u64,
    /// Trailing checkpoints averaged into the frozen model.
    pub average_last: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_tokens: 256,
            lr: 2e-3,
            warmup: 100,
            label_smoothing: 0.1,
            checkpoint_every: 20,
            average_last: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub threshold: f64,
    pub brevity_penalty: bool,
    /// Splits translated and scanned; probing needs `test_out`.
    pub splits: Vec<String>,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            brevity_penalty: true,
            splits: vec!["valid".into(), "test_in".into(), "test_out".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Leading training pairs the probes are fitted on.
    pub train_pairs: usize,
    pub steps: u64,
    pub batch_tokens: usize,
    pub lr: f64,
    pub snapshot_every: u64,
    pub average_last: usize,
    pub head: HeadKind,
    pub encoder_state: EncoderState,
    /// Encoder rows, 0 being the embedding; all when absent.
    pub encoder_layers: Option<Vec<usize>>,
    pub aligned: bool,
    pub no_cross: bool,
    pub decoder: bool,
    /// Decoder layers, 1-based; all when absent.
    pub decoder_layers: Option<Vec<usize>>,
    pub variants: Vec<DecoderVariant>,
    pub bootstrap_resamples: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let s = ProbeSuiteConfig::default();
        let t = ProbeTrainConfig::default();
        Self {
            train_pairs: 2000,
            steps: t.steps,
            batch_tokens: t.batch_tokens,
            lr: t.lr,
            snapshot_every: t.snapshot_every,
            average_last: t.average_last,
            head: t.head,
            encoder_state: s.encoder_state,
            encoder_layers: s.encoder_layers,
            aligned: s.aligned,
            no_cross: s.no_cross,
            decoder: s.decoder,
            decoder_layers: s.decoder_layers,
            variants: s.variants,
            bootstrap_resamples: s.bootstrap_resamples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub tables: Vec<TableId>,
    pub plots: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        let s = ReportSpec::default();
        Self {
            tables: s.tables,
            plots: s.plots,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a JSON value; maps serialize with sorted keys, so equal
/// values hash equally.
pub(crate) fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("json serializes"))
}

impl RunConfig {
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED_CONFIG).expect("bundled config is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `section.key=value` assignments, values in TOML syntax
    /// (bare words are taken as strings), then revalidates.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let bad = |m: String| PipelineError::Config(m);
        let mut doc = toml::Value::try_from(self).map_err(|e| bad(e.to_string()))?;
        for s in sets {
            let (path, raw) = s.split_once('=').ok_or_else(|| bad(format!("override {s:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut doc;
            let keys: Vec<&str> = path.trim().split('.').collect();
            for (i, k) in keys.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| bad(format!("override {path:?}: {k:?} is not in a table")))?;
                if i + 1 == keys.len() {
                    table.insert(k.to_string(), value.clone());
                    break;
                }
                node = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.generator_spec().validate()?;
        self.model_config(1).validate()?;
        if self.train.average_last == 0 {
            return bad("train.average_last must be positive".into());
        }
        if self.train.checkpoint_every == 0 || self.train.steps == 0 {
            return bad("train.steps and train.checkpoint_every must be positive".into());
        }
        let saved = self.train.steps.div_ceil(self.train.checkpoint_every);
        if (self.train.average_last as u64) > saved {
            return bad(format!(
                "train.average_last = {} but only {saved} checkpoints are written",
                self.train.average_last
            ));
        }
        if self.beam.beam_size == 0 || self.beam.max_len == 0 {
            return bad("beam.beam_size and beam.max_len must be positive".into());
        }
        if !self.detect.threshold.is_finite() {
            return bad(format!("detect.threshold {} is not finite", self.detect.threshold));
        }
        for s in &self.detect.splits {
            if !SPLITS.contains(&s.as_str()) {
                return bad(format!("detect.splits: unknown split {s:?}"));
            }
        }
        if self.probe.train_pairs == 0 {
            return bad("probe.train_pairs must be positive".into());
        }
        Ok(())
    }

    /// Hash of everything except output paths.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("paths");
        hash_json(&v)
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            seed: self.seed,
            max_len: self.corpus.max_len,
            lexicon: self.corpus.lexicon.clone(),
            sizes: self.corpus.sizes.clone(),
            in_domain: self.corpus.in_domain.clone(),
            out_domain: self.corpus.out_domain.clone(),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ffn: m.d_ffn,
            vocab_size,
            max_len: self.corpus.max_len,
            dropout: m.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_tokens: t.batch_tokens,
            lr: t.lr,
            warmup: t.warmup,
            label_smoothing: t.label_smoothing,
            checkpoint_every: t.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            threshold: self.detect.threshold,
            brevity_penalty: self.detect.brevity_penalty,
        }
    }

    pub fn probe_suite_config(&self) -> ProbeSuiteConfig {
        let p = &self.probe;
        ProbeSuiteConfig {
            encoder_layers: p.encoder_layers.clone(),
            encoder_state: p.encoder_state,
            aligned: p.aligned,
            no_cross: p.no_cross,
            decoder: p.decoder,
            decoder_layers: p.decoder_layers.clone(),
            variants: p.variants.clone(),
            train: ProbeTrainConfig {
                steps: p.steps,
                batch_tokens: p.batch_tokens,
                lr: p.lr,
                snapshot_every: p.snapshot_every,
                average_last: p.average_last,
                head: p.head,
                seed: self.seed,
            },
            bootstrap_resamples: p.bootstrap_resamples,
        }
    }

    pub fn report_spec(&self, model_checksum: String) -> ReportSpec {
        ReportSpec {
            tables: self.report.tables.clone(),
            plots: self.report.plots,
            meta: RunMeta {
                seed: self.seed,
                config_hash: self.config_hash(),
                model_checksum,
            },
        }
    }

    /// Restricts the probe suite to one experiment selection: `layers`
    /// keeps the encoder probes on those rows, `variants` keeps the decoder
    /// probes of those variants. A selection that names only one of the
    /// two drops the other kind.
    pub fn select_probes(&mut self, layers: Option<Vec<usize>>, variants: Option<Vec<DecoderVariant>>) {
        let p = &mut self.probe;
        match (&layers, &variants) {
            (None, None) => return,
            (Some(_), None) => p.decoder = false,
            (None, Some(_)) => {
                p.aligned = false;
                p.no_cross = false;
            }
            (Some(_), Some(_)) => {}
        }
        if layers.is_some() {
            p.encoder_layers = layers;
        }
        if let Some(v) = variants {
            p.decoder = true;
            p.variants = v;
        }
    }

    /// Stable JSON view used by stage keys.
    pub(crate) fn section(&self, name: &str) -> serde_json::Value {
        let v = serde_json::to_value(self).expect("config serializes");
        match name {
            "seed" => json!(self.seed),
            _ => v[name].clone(),
        }
    }
}

/// Parses a layer list such as `emb,1..3` or `0,2`: `emb` is row 0 and
/// `a..b` is inclusive.
pub fn parse_layers(text: &str) -> Result<Vec<usize>> {
    let bad = |m: String| PipelineError::Config(format!("--layers {text:?}: {m}"));
    let num = |s: &str| -> Result<usize> {
        match s.trim() {
            "emb" => Ok(0),
            t => t.parse().map_err(|_| bad(format!("{t:?} is not a layer"))),
        }
    };
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(bad(format!("empty range {part}")));
            }
            out.extend(a..=b);
        } else {
            out.push(num(part)?);
        }
    }
    if out.is_empty() {
        return Err(bad("no layers".into()));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
