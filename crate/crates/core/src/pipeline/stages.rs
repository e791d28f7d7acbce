use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::config::{hash_json, RunConfig};
use super::manifest::{reset_stage, Manifest, Stage};
use super::{PipelineError, Result};
use crate::corpus::{
    detokenize, generate_synthetic, load_parallel, write_parallel, CorpusSplit, Domain, LoadOptions, SplitName,
    TokenizerMode, Vocabulary,
};
use crate::hallucination::{detect, BeamTranslator, DetectionSummary, ScriptedTranslator, Translator};
use crate::probing::{run_probe_suite, EvalSets, ProbeDataset, ProbeSuiteResult};
use crate::report::{render, write_report, ReportError};
use crate::transformer::{average_checkpoints, train, write_container, TransformerModel};

const VOCAB_FILE: &str = "vocab.txt";
const MODEL_FILE: &str = "model.bin";
const RESULTS_FILE: &str = "results.json";

fn split_kind(name: &str) -> Option<(SplitName, Domain)> {
    Some(match name {
        "train" => (SplitName::Train, Domain::In),
        "valid" => (SplitName::Valid, Domain::In),
        "test_in" => (SplitName::Test, Domain::In),
        "test_out" => (SplitName::Test, Domain::Out),
        _ => return None,
    })
}

/// Loads one split written by the corpus stage.
pub fn load_split(dir: &Path, name: &str, vocab: &Vocabulary, max_len: usize) -> Result<CorpusSplit> {
    let (split_name, domain) = split_kind(name).ok_or_else(|| PipelineError::Config(format!("unknown split {name:?}")))?;
    let opts = LoadOptions {
        mode: TokenizerMode::Word,
        max_len,
        split_name,
        domain,
    };
    let loaded = load_parallel(&dir.join(format!("{name}.src")), &dir.join(format!("{name}.tgt")), vocab, &opts)?;
    if loaded.dropped > 0 {
        return Err(PipelineError::Stale {
            stage: Stage::Corpus,
            reason: format!("{name} has {} pairs longer than max_len {max_len}", loaded.dropped),
            hint: "regenerate the corpus with the current config".into(),
        });
    }
    Ok(loaded.split)
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| PipelineError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

fn ids_line(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Stage runner bound to one config and run root.
#[derive(Clone, Debug)]
pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
}

impl Pipeline {
    /// Artifacts go under `cfg.paths.out`.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.paths.out.clone();
        Ok(Self { cfg, root })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    fn key(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let v = match stage {
            Stage::Corpus => json!({ "stage": "corpus", "seed": c.section("seed"), "corpus": c.section("corpus") }),
            Stage::Model => json!({
                "stage": "model",
                "upstream": self.key(Stage::Corpus),
                "model": c.section("model"),
                "train": c.section("train"),
            }),
            Stage::Translate => json!({
                "stage": "translate",
                "upstream": self.key(Stage::Model),
                "beam": c.section("beam"),
                "splits": c.detect.splits,
            }),
            Stage::Detect => json!({
                "stage": "detect",
                "upstream": self.key(Stage::Translate),
                "detect": c.section("detect"),
            }),
            Stage::Probe => json!({
                "stage": "probe",
                "model": self.key(Stage::Model),
                "detect": self.key(Stage::Detect),
                "probe": c.section("probe"),
            }),
            Stage::Report => json!({
                "stage": "report",
                "probe": self.key(Stage::Probe),
                "detect": self.key(Stage::Detect),
                "report": c.section("report"),
            }),
        };
        hash_json(&v)
    }

    /// Manifest of an upstream stage, checked against the current config.
    fn upstream(&self, stage: Stage) -> Result<Manifest> {
        Manifest::verify(&self.root, stage, Some(&self.key(stage)))
    }

    fn finish(&self, stage: Stage, inputs: &[Stage], files: Vec<String>, meta: serde_json::Value) -> Result<Manifest> {
        let inputs: BTreeMap<Stage, String> = inputs.iter().map(|&s| (s, self.key(s))).collect();
        self.finish_with(stage, inputs, files, meta)
    }

    fn finish_with(
        &self,
        stage: Stage,
        inputs: BTreeMap<Stage, String>,
        files: Vec<String>,
        meta: serde_json::Value,
    ) -> Result<Manifest> {
        Manifest::write(&self.root, stage, self.key(stage), self.cfg.config_hash(), inputs, &files, meta)
    }

    /// Whether a stage's artifacts exist, are intact and match the config.
    pub fn is_current(&self, stage: Stage) -> bool {
        Manifest::verify(&self.root, stage, Some(&self.key(stage))).is_ok()
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        self.upstream(Stage::Corpus)?;
        Ok(Vocabulary::load(&self.stage_dir(Stage::Corpus).join(VOCAB_FILE))?)
    }

    pub fn split(&self, vocab: &Vocabulary, name: &str) -> Result<CorpusSplit> {
        load_split(&self.stage_dir(Stage::Corpus), name, vocab, self.cfg.corpus.max_len)
    }

    /// The frozen, checkpoint-averaged model.
    pub fn model(&self) -> Result<TransformerModel<f32>> {
        let m = self.upstream(Stage::Model)?;
        let mut model = TransformerModel::<f32>::load(&self.stage_dir(Stage::Model).join(MODEL_FILE))?;
        model.freeze();
        if m.meta["checksum"].as_str() != Some(model.checksum().as_str()) {
            return Err(PipelineError::Stale {
                stage: Stage::Model,
                reason: "model checksum differs from the manifest".into(),
                hint: "run `halluprobe train` with the same config to rebuild it".into(),
            });
        }
        Ok(model)
    }

    /// Generates the synthetic corpus: `vocab.txt` and `<split>.src/.tgt`.
    pub fn generate(&self) -> Result<Manifest> {
        let dir = reset_stage(&self.root, Stage::Corpus)?;
        let corpus = generate_synthetic(&self.cfg.generator_spec())?;
        corpus.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut files = vec![VOCAB_FILE.to_string()];
        let mut sizes = serde_json::Map::new();
        for split in corpus.splits() {
            let name = split.label();
            write_parallel(split, &dir, &name)?;
            files.push(format!("{name}.src"));
            files.push(format!("{name}.tgt"));
            sizes.insert(name, json!(split.len()));
        }
        self.finish(Stage::Corpus, &[], files, json!({ "vocab_size": corpus.vocab.len(), "pairs": sizes }))
    }

    /// Trains, averages the trailing checkpoints and freezes the result.
    pub fn train(&self) -> Result<Manifest> {
        let vocab = self.vocab()?;
        let train_split = self.split(&vocab, "train")?;
        let dir = reset_stage(&self.root, Stage::Model)?;
        let ckpt_dir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| PipelineError::io(&ckpt_dir, e))?;
        let mut model = TransformerModel::<f32>::new(self.cfg.model_config(vocab.len()), self.cfg.seed)?;
        let report = train(&mut model, &train_split, &self.cfg.train_config(), Some(&ckpt_dir))?;
        let k = self.cfg.train.average_last.min(report.checkpoints.len());
        let last = &report.checkpoints[report.checkpoints.len() - k..];
        let mut avg = average_checkpoints(last)?;
        avg.freeze();
        let names: Vec<String> = last
            .iter()
            .map(|p| p.file_name().expect("file name").to_string_lossy().into_owned())
            .collect();
        avg.save(&dir.join(MODEL_FILE), json!({ "averaged": names }))?;

        let mut log = String::from("step\tloss\n");
        for (i, l) in report.losses.iter().enumerate() {
            let _ = writeln!(log, "{}\t{l:.6}", i + 1);
        }
        write(&dir.join("train_log.tsv"), &log)?;
        let mut files = vec![MODEL_FILE.to_string(), "train_log.tsv".to_string()];
        files.extend(names.iter().map(|n| format!("checkpoints/{n}")));
        let meta = json!({
            "checksum": avg.checksum(),
            "params": avg.layout().param_count(),
            "final_loss": report.losses.last(),
            "averaged": names,
        });
        self.finish(Stage::Model, &[Stage::Corpus], files, meta)
    }

    /// Beam-decodes every detection split: `<split>.ids` holds output token
    /// ids, `<split>.txt` the detokenized text.
    pub fn translate(&self) -> Result<Manifest> {
        let vocab = self.vocab()?;
        let model = self.model()?;
        let translator = BeamTranslator::new(&model, self.cfg.beam.clone())?;
        let splits = self
            .cfg
            .detect
            .splits
            .iter()
            .map(|s| self.split(&vocab, s))
            .collect::<Result<Vec<_>>>()?;
        let dir = reset_stage(&self.root, Stage::Translate)?;
        let mut files = Vec::new();
        for split in &splits {
            let name = split.label();
            log::info!("translating {name} ({} pairs)", split.len());
            let outputs = split
                .pairs()
                .par_iter()
                .map(|p| translator.translate(&p.source))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let (mut ids, mut text) = (String::new(), String::new());
            for o in &outputs {
                ids.push_str(&ids_line(o));
                ids.push('\n');
                text.push_str(&detokenize(o, &vocab));
                text.push('\n');
            }
            write(&dir.join(format!("{name}.ids")), &ids)?;
            write(&dir.join(format!("{name}.txt")), &text)?;
            files.push(format!("{name}.ids"));
            files.push(format!("{name}.txt"));
        }
        self.finish(Stage::Translate, &[Stage::Model], files, json!({}))
    }

    fn translations(&self, split: &CorpusSplit) -> Result<ScriptedTranslator> {
        let name = split.label();
        let path = self.stage_dir(Stage::Translate).join(format!("{name}.ids"));
        let text = read(&path)?;
        let lines: Vec<&str> = text.lines().collect();
        let stale = |reason: String| PipelineError::Stale {
            stage: Stage::Translate,
            reason,
            hint: "run `halluprobe translate` with the same config to rebuild it".into(),
        };
        if lines.len() != split.len() {
            return Err(stale(format!("{name}: {} outputs for {} pairs", lines.len(), split.len())));
        }
        let mut tr = ScriptedTranslator::new();
        for (p, line) in split.pairs().iter().zip(lines) {
            let out = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<Vec<u32>, _>>()
                .map_err(|e| stale(format!("{}: {e}", path.display())))?;
            tr.script(p.source.clone(), out);
        }
        Ok(tr)
    }

    /// Scores the translations and writes `<split>.tsv` and `<split>.json`.
    pub fn detect(&self) -> Result<Manifest> {
        let vocab = self.vocab()?;
        self.upstream(Stage::Translate)?;
        let splits = self
            .cfg
            .detect
            .splits
            .iter()
            .map(|s| self.split(&vocab, s))
            .collect::<Result<Vec<_>>>()?;
        let scripted = splits.iter().map(|s| self.translations(s)).collect::<Result<Vec<_>>>()?;
        let dir = reset_stage(&self.root, Stage::Detect)?;
        let mut files = Vec::new();
        let mut stats = serde_json::Map::new();
        for (split, tr) in splits.iter().zip(&scripted) {
            let r = detect(tr, split, &self.cfg.detect_config())?;
            let name = split.label();
            log::info!("{name}: {} hallucinated", r.stats());
            r.write(&dir, &name)?;
            files.push(format!("{name}.tsv"));
            files.push(format!("{name}.json"));
            stats.insert(name, json!(r.stats()));
        }
        self.finish(Stage::Detect, &[Stage::Translate], files, json!({ "stats": stats }))
    }

    fn detections(&self) -> Result<Vec<DetectionSummary>> {
        self.upstream(Stage::Detect)?;
        self.cfg
            .detect
            .splits
            .iter()
            .map(|s| Ok(DetectionSummary::read(&self.stage_dir(Stage::Detect).join(format!("{s}.json")))?))
            .collect()
    }

    /// Trains and evaluates the probe suite on `test_in` and `test_out`,
    /// with the hallucinated subset taken from `test_out` detection.
    pub fn probe(&self) -> Result<Manifest> {
        if !self.cfg.detect.splits.iter().any(|s| s == "test_out") {
            return Err(PipelineError::Config("probing needs test_out among detect.splits".into()));
        }
        let vocab = self.vocab()?;
        let model = self.model()?;
        let hallu = self
            .detections()?
            .into_iter()
            .find(|d| d.split == "test_out")
            .expect("test_out detection present")
            .indices;
        let train_split = self.split(&vocab, "train")?;
        let test_in = self.split(&vocab, "test_in")?;
        let test_out = self.split(&vocab, "test_out")?;
        let train_ds = ProbeDataset::build(&model, &train_split, Some(self.cfg.probe.train_pairs))?;
        let in_ds = ProbeDataset::build(&model, &test_in, None)?;
        let out_ds = ProbeDataset::build(&model, &test_out, None)?;
        let sets = EvalSets {
            in_domain: Some(&in_ds),
            all: &out_ds,
            hallu: &hallu,
        };
        let (result, probes) = run_probe_suite(&model, &train_ds, sets, &self.cfg.probe_suite_config())?;

        let dir = reset_stage(&self.root, Stage::Probe)?;
        let pdir = dir.join("probes");
        std::fs::create_dir_all(&pdir).map_err(|e| PipelineError::io(&pdir, e))?;
        let body = serde_json::to_string_pretty(&result).expect("results serialize") + "\n";
        write(&dir.join(RESULTS_FILE), &body)?;
        let mut files = vec![RESULTS_FILE.to_string()];
        for p in &probes {
            let section = serde_json::to_value(p.section).expect("section serializes");
            let name = format!("probes/{}_{}.bin", section.as_str().expect("string"), p.layer);
            let meta = json!({ "section": section, "layer": p.layer, "model_checksum": result.model_checksum });
            write_container(&dir.join(&name), &p.params.to_container(meta))?;
            files.push(name);
        }
        let meta = json!({ "hallucinated": result.hallu_count, "all": result.all_count });
        self.finish(Stage::Probe, &[Stage::Model, Stage::Detect], files, meta)
    }

    /// Probe results if a probe run exists for the current model and
    /// detections. The probe selection itself may differ from the config.
    fn probe_results(&self) -> Result<Option<(Manifest, ProbeSuiteResult)>> {
        let m = match Manifest::verify(&self.root, Stage::Probe, None) {
            Err(PipelineError::Missing { .. }) => return Ok(None),
            other => other?,
        };
        for s in [Stage::Model, Stage::Detect] {
            if m.inputs.get(&s) != Some(&self.key(s)) {
                return Err(PipelineError::Stale {
                    stage: Stage::Probe,
                    reason: format!("probes were run against different {s} artifacts"),
                    hint: "run `halluprobe probe` with the same config to rebuild it".into(),
                });
            }
        }
        let path = self.stage_dir(Stage::Probe).join(RESULTS_FILE);
        let r = serde_json::from_str(&read(&path)?).map_err(|e| PipelineError::Stale {
            stage: Stage::Probe,
            reason: format!("{}: {e}", path.display()),
            hint: "run `halluprobe probe` to rebuild it".into(),
        })?;
        Ok(Some((m, r)))
    }

    /// Renders whatever detection and probe results exist into `report/`.
    pub fn report(&self) -> Result<Manifest> {
        let detections = match self.detections() {
            Err(PipelineError::Missing { .. }) => Vec::new(),
            other => other?,
        };
        let probes = self.probe_results()?;
        if probes.is_none() && detections.is_empty() {
            return Err(ReportError::NothingToReport.into());
        }
        let checksum = match Manifest::read(&self.root, Stage::Model) {
            Ok(m) => m.meta["checksum"].as_str().unwrap_or_default().to_string(),
            Err(_) => String::new(),
        };
        let rendered = render(probes.as_ref().map(|(_, r)| r), &detections, &self.cfg.report_spec(checksum))?;
        let dir = reset_stage(&self.root, Stage::Report)?;
        let written = write_report(&dir, &rendered)?;
        let files = written
            .iter()
            .map(|p| p.strip_prefix(&dir).expect("inside report dir").to_string_lossy().into_owned())
            .collect();
        let mut inputs = BTreeMap::new();
        if !detections.is_empty() {
            inputs.insert(Stage::Detect, self.key(Stage::Detect));
        }
        if let Some((m, _)) = &probes {
            inputs.insert(Stage::Probe, m.key.clone());
        }
        self.finish_with(Stage::Report, inputs, files, json!({}))
    }

    pub fn run_stage(&self, stage: Stage) -> Result<Manifest> {
        match stage {
            Stage::Corpus => self.generate(),
            Stage::Model => self.train(),
            Stage::Translate => self.translate(),
            Stage::Detect => self.detect(),
            Stage::Probe => self.probe(),
            Stage::Report => self.report(),
        }
    }

    /// Runs every stage in order, skipping those already current.
    pub fn run_all(&self) -> Result<Vec<Manifest>> {
        Stage::ALL
            .iter()
            .map(|&s| {
                if self.is_current(s) {
                    log::info!("{s} is up to date");
                    Manifest::read(&self.root, s)
                } else {
                    log::info!("running {s}");
                    self.run_stage(s)
                }
            })
            .collect()
    }
}
