//! Encoder-decoder transformer with full state tracing, cached decoding,
//! beam search, training and checkpoint files.

mod beam;
mod checkpoint;
mod forward;
mod infer;
mod model;
pub(crate) mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::numerics::NumericsError;

pub use beam::{beam_search, greedy_search, BeamParams, Hypothesis, StepScorer};
pub use checkpoint::{
    average_checkpoints, average_models, read_container, write_container, Blob, Container, ContainerKind,
    FORMAT_VERSION, MAGIC,
};
pub use forward::{DecoderVariant, EncoderPoint, ForwardOutput, LayerTrace};
pub(crate) use forward::LN_EPS;
pub use infer::{DecodeState, EncodedSource, ModelScorer};
pub use model::{AttnIx, DecIx, EncIx, FfnIx, Layout, LnIx, TransformerModel};
pub use train::{train, TrainConfig, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum TransformerError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("empty sequence")]
    Empty,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Token { id: u32, vocab: usize },
    #[error("model is frozen")]
    Frozen,
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("training diverged at step {step}; last good checkpoint: {last_good:?}")]
    Diverged { step: u64, last_good: Option<PathBuf> },
}

impl TransformerError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// Two encoder and two decoder layers, two heads, width 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ffn: 128,
            vocab_size,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        let positive = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TransformerError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TransformerError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TransformerError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of cross-attention matrices per sentence.
    pub fn n_cross_maps(&self) -> usize {
        self.n_dec_layers * self.n_heads
    }
}
