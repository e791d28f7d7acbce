//! Parallel text, vocabulary, tokenization and the synthetic task generator.

mod generate;
mod load;
mod tokenize;
mod vocab;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use generate::{generate_synthetic, DomainParams, GeneratorSpec, LexiconSpec, SplitSizes, SyntheticCorpus, Lexicon, WordKind};
pub use load::{load_parallel, write_parallel, LoadOptions, LoadedSplit};
pub use tokenize::{detokenize, tokenize, BpeModel, TokenizerMode, MAX_MERGES};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("sentence is empty after tokenization")]
    EmptySentence,
    #[error("source has {source_lines} lines but target has {target_lines}")]
    Alignment {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("pair {index}: {reason}")]
    InvalidPair { index: usize, reason: String },
    #[error("generator config: {0}")]
    Config(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    In,
    Out,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::In => "in",
            Domain::Out => "out",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub raw_source: String,
    pub raw_target: String,
    pub domain_tag: String,
}

impl SentencePair {
    fn check(&self, max_len: usize) -> Result<(), String> {
        for (side, seq) in [("source", &self.source), ("target", &self.target)] {
            if seq.is_empty() {
                return Err(format!("{side} is empty"));
            }
            if seq.last() != Some(&EOS) {
                return Err(format!("{side} does not end with eos"));
            }
            if seq.contains(&PAD) {
                return Err(format!("{side} contains pad"));
            }
            if seq.len() > max_len {
                return Err(format!("{side} length {} exceeds {max_len}", seq.len()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pairs: Vec<SentencePair>,
    split_name: SplitName,
    domain: Domain,
}

impl CorpusSplit {
    /// Validates every pair: non-empty, eos-terminated, pad-free, at most
    /// `max_len` tokens on both sides.
    pub fn new(
        pairs: Vec<SentencePair>,
        split_name: SplitName,
        domain: Domain,
        max_len: usize,
    ) -> Result<Self, CorpusError> {
        for (index, p) in pairs.iter().enumerate() {
            p.check(max_len)
                .map_err(|reason| CorpusError::InvalidPair { index, reason })?;
        }
        Ok(Self {
            pairs,
            split_name,
            domain,
        })
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split_name(&self) -> SplitName {
        self.split_name
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// `train`, `valid`, `test_in` or `test_out`.
    pub fn label(&self) -> String {
        match self.split_name {
            SplitName::Test => format!("test_{}", self.domain.tag()),
            other => other.to_string(),
        }
    }

    /// Pairs at the given indices, in index order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            split_name: self.split_name,
            domain: self.domain,
        }
    }
}
