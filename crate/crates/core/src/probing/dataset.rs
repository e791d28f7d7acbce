use super::{stack_maps, ProbeError, ProbeMode, Result};
use crate::corpus::{CorpusSplit, SentencePair, BOS, EOS, PAD};
use crate::numerics::{Scalar, Tensor};
use crate::transformer::{EncoderPoint, LayerTrace, TransformerModel};

/// Teacher-forced traces of a frozen model over a list of pairs.
///
/// The model checksum is recorded so probes refuse to train or evaluate
/// against a different model.
#[derive(Clone, Debug)]
pub struct ProbeDataset<T: Scalar = f32> {
    pub label: String,
    pub checksum: String,
    pub pairs: Vec<SentencePair>,
    pub traces: Vec<LayerTrace<T>>,
}

/// One sentence prepared for an encoder probe. Rows of the probe output
/// align with `targets`; `PAD` targets are not scored.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample<T: Scalar = f32> {
    /// Source-ordered states, `S × d`.
    pub states: Tensor<T>,
    /// Stacked cross-attention maps `d·k × (T·S)` with `(T, S)`.
    pub maps: Option<(Tensor<T>, usize, usize)>,
    pub targets: Vec<u32>,
}

impl<T: Scalar> ProbeExample<T> {
    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn supervised(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD).count()
    }
}

fn is_special(id: u32) -> bool {
    id == PAD || id == BOS || id == EOS
}

/// Probe labels in target order: the reference token at every position,
/// with special tokens masked.
pub(crate) fn aligned_targets(target: &[u32]) -> Vec<u32> {
    target.iter().map(|&t| if is_special(t) { PAD } else { t }).collect()
}

/// Probe labels in source order: source word `i` is paired with target
/// word `i`; the source eos and any surplus positions are masked.
pub(crate) fn positional_targets(source_len: usize, target: &[u32]) -> Vec<u32> {
    let words = target.iter().take_while(|&&t| t != EOS).count();
    (0..source_len)
        .map(|i| match target.get(i) {
            Some(&t) if i + 1 < source_len && i < words && !is_special(t) => t,
            _ => PAD,
        })
        .collect()
}

impl<T: Scalar> ProbeDataset<T> {
    /// Traces the first `limit` pairs of `split` (all when `None`).
    pub fn build(model: &TransformerModel<T>, split: &CorpusSplit, limit: Option<usize>) -> Result<Self> {
        if !model.is_frozen() {
            return Err(ProbeError::NotFrozen);
        }
        let n = limit.unwrap_or(split.len()).min(split.len());
        let pairs = split.pairs()[..n].to_vec();
        let traces = pairs
            .iter()
            .map(|p| model.trace_pair(&p.source, &p.target))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            label: split.label(),
            checksum: model.checksum(),
            pairs,
            traces,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, indices: &[usize], label: &str) -> Self {
        Self {
            label: label.to_string(),
            checksum: self.checksum.clone(),
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
        }
    }

    pub fn check_model(&self, model: &TransformerModel<T>) -> Result<()> {
        let m = model.checksum();
        if m != self.checksum {
            return Err(ProbeError::StaleDataset {
                dataset: self.checksum.clone(),
                model: m,
            });
        }
        Ok(())
    }

    /// Encoder-probe examples for the states at `point`.
    pub fn examples(&self, point: EncoderPoint, mode: ProbeMode) -> Result<Vec<ProbeExample<T>>> {
        self.pairs
            .iter()
            .zip(&self.traces)
            .map(|(pair, tr)| {
                let states = tr
                    .encoder(point)
                    .ok_or_else(|| ProbeError::Config(format!("encoder point {point:?} not traced")))?
                    .clone();
                let s = states.shape()[0];
                Ok(match mode {
                    ProbeMode::Aligned => ProbeExample {
                        states,
                        maps: Some(stack_maps(&tr.cross_attn)?),
                        targets: aligned_targets(&pair.target),
                    },
                    ProbeMode::NoCross => ProbeExample {
                        states,
                        maps: None,
                        targets: positional_targets(s, &pair.target),
                    },
                })
            })
            .collect()
    }
}
