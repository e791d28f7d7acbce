use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};

pub const MANIFEST_FORMAT: &str = "halluprobe-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Corpus,
    Model,
    Translate,
    Detect,
    Probe,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Corpus,
        Stage::Model,
        Stage::Translate,
        Stage::Detect,
        Stage::Probe,
        Stage::Report,
    ];

    /// Artifact directory under the run root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Model => "model",
            Stage::Translate => "translate",
            Stage::Detect => "detect",
            Stage::Probe => "probe",
            Stage::Report => "report",
        }
    }

    /// Subcommand that produces the stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Corpus => "generate",
            Stage::Model => "train",
            Stage::Translate => "translate",
            Stage::Detect => "detect",
            Stage::Probe => "probe",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir())
    }
}

/// Written last into a stage directory; its presence marks the stage
/// complete. `key` hashes the stage's config sections and upstream keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub stage: Stage,
    pub key: String,
    pub config_hash: String,
    /// Upstream stage keys this stage was built from.
    pub inputs: BTreeMap<Stage, String>,
    /// SHA-256 of every output file, by path relative to the stage directory.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn hint(stage: Stage) -> String {
    format!("run `halluprobe {}` with the same config to rebuild it", stage.command())
}

impl Manifest {
    pub fn path(root: &Path, stage: Stage) -> PathBuf {
        root.join(stage.dir()).join(MANIFEST_FILE)
    }

    pub fn read(root: &Path, stage: Stage) -> Result<Self> {
        let path = Self::path(root, stage);
        if !path.exists() {
            return Err(PipelineError::Missing {
                stage,
                hint: hint(stage),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Stale {
            stage,
            reason: format!("unreadable manifest: {e}"),
            hint: hint(stage),
        })?;
        if m.format != MANIFEST_FORMAT || m.stage != stage {
            return Err(PipelineError::Stale {
                stage,
                reason: format!("manifest is {} for {}", m.format, m.stage),
                hint: hint(stage),
            });
        }
        Ok(m)
    }

    /// Reads a stage's manifest and checks that it was built for `key`
    /// (when given) and that no output file changed since.
    pub fn verify(root: &Path, stage: Stage, key: Option<&str>) -> Result<Self> {
        let m = Self::read(root, stage)?;
        if let Some(k) = key {
            if m.key != k {
                return Err(PipelineError::Stale {
                    stage,
                    reason: "built from a different config or upstream artifact".into(),
                    hint: hint(stage),
                });
            }
        }
        let dir = root.join(stage.dir());
        for (rel, want) in &m.outputs {
            let path = dir.join(rel);
            let got = if path.exists() { file_sha256(&path)? } else { "missing".into() };
            if &got != want {
                return Err(PipelineError::Stale {
                    stage,
                    reason: format!("{} changed since it was written", path.display()),
                    hint: hint(stage),
                });
            }
        }
        Ok(m)
    }

    /// Hashes the listed outputs and writes the manifest.
    pub fn write(
        root: &Path,
        stage: Stage,
        key: String,
        config_hash: String,
        inputs: BTreeMap<Stage, String>,
        files: &[String],
        meta: serde_json::Value,
    ) -> Result<Self> {
        let dir = root.join(stage.dir());
        let mut outputs = BTreeMap::new();
        for rel in files {
            outputs.insert(rel.clone(), file_sha256(&dir.join(rel))?);
        }
        let m = Self {
            format: MANIFEST_FORMAT.into(),
            stage,
            key,
            config_hash,
            inputs,
            outputs,
            meta,
        };
        let path = Self::path(root, stage);
        let body = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
        std::fs::write(&path, body).map_err(|e| PipelineError::io(&path, e))?;
        Ok(m)
    }
}

/// Clears a stage directory before rebuilding it, manifest first so an
/// interrupted rebuild reads as missing rather than complete.
pub(crate) fn reset_stage(root: &Path, stage: Stage) -> Result<PathBuf> {
    let dir = root.join(stage.dir());
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        std::fs::remove_file(&manifest).map_err(|e| PipelineError::io(&manifest, e))?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    Ok(dir)
}
