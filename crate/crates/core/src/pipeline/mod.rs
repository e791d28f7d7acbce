//! End-to-end run wiring: one declarative config, six stages, each writing
//! its artifacts plus a manifest of content hashes into its own directory
//! under the run root.
//!
//! ```text
//! corpus ─ model ─ translate ─ detect ─┐
//!            └─────────────────────── probe ─ report
//! ```
//!
//! A stage refuses to read upstream artifacts whose manifest key differs
//! from the one the current config implies, or whose files no longer match
//! their recorded hashes.

mod config;
mod manifest;
mod stages;

use std::path::{Path, PathBuf};

pub use config::{
    parse_layers, CorpusSection, DetectSection, ModelSection, Paths, ProbeSection, ReportSection, RunConfig,
    TrainSection, BUNDLED_CONFIG, SPLITS,
};
pub use manifest::{file_sha256, Manifest, Stage, MANIFEST_FILE, MANIFEST_FORMAT};
pub use stages::{load_split, Pipeline};

use crate::corpus::CorpusError;
use crate::hallucination::HallucinationError;
use crate::probing::ProbeError;
use crate::report::ReportError;
use crate::transformer::TransformerError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("no {stage} artifacts found; {hint}")]
    Missing { stage: Stage, hint: String },
    #[error("refusing stale {stage} artifacts: {reason}; {hint}")]
    Stale { stage: Stage, reason: String, hint: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Hallucination(#[from] HallucinationError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
