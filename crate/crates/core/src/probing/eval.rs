use serde::{Deserialize, Serialize};

use super::dataset::aligned_targets;
use super::train::features;
use super::{apply_head, HeadKind, OutputHead, ProbeDataset, ProbeError, ProbeExample, ProbeMode, ProbeParams, Result};
use crate::corpus::{BOS, EOS, PAD};
use crate::metrics::{corpus_bleu, AccuracyScore, BleuConfig};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::transformer::{DecoderVariant, EncoderPoint, TransformerModel};

/// Predictions of one sentence next to its reference words.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    /// Scored positions; empty for unaligned probes.
    pub accuracy: AccuracyScore,
    pub hypothesis: Vec<u32>,
    pub reference: Vec<u32>,
}

/// Per-sentence scores of one probe over one subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetEval {
    pub sentences: Vec<SentenceScore>,
}

impl SubsetEval {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Micro-averaged accuracy; `None` when nothing was scored.
    pub fn accuracy(&self) -> Option<f64> {
        self.sentences.iter().map(|s| s.accuracy).sum::<AccuracyScore>().value()
    }

    fn corpus(&self, cfg: &BleuConfig) -> Option<f64> {
        if self.sentences.is_empty() {
            return None;
        }
        let pairs = self.sentences.iter().map(|s| (s.hypothesis.as_slice(), s.reference.as_slice()));
        Some(corpus_bleu(pairs, cfg).expect("built-in BLEU configs are valid").value)
    }

    /// Corpus BLEU up to 4-grams.
    pub fn bleu(&self) -> Option<f64> {
        self.corpus(&BleuConfig::standard())
    }

    /// Corpus unigram BLEU with brevity penalty.
    pub fn unigram_bleu(&self) -> Option<f64> {
        self.corpus(&BleuConfig::unigram())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
        }
    }
}

fn reference_words(target: &[u32]) -> Vec<u32> {
    target.iter().copied().filter(|&t| t != PAD && t != BOS && t != EOS).collect()
}

/// Probe logits for one prepared example.
pub fn probe_logits<T: Scalar>(ex: &ProbeExample<T>, probe: &ProbeParams<T>, head: Option<&OutputHead<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let proj = g.constant(probe.proj.clone());
    let mix = (probe.mode == ProbeMode::Aligned).then(|| g.constant(probe.mix.clone()));
    let x = features(&mut g, proj, mix, ex)?;
    let hv = head.map(|h| h.bind(&mut g));
    let out = apply_head(&mut g, x, hv)?;
    Ok(g.value(out).clone())
}

/// Row-wise argmax of the probe logits, lowest id on ties.
pub fn probe_predictions<T: Scalar>(ex: &ProbeExample<T>, probe: &ProbeParams<T>, head: Option<&OutputHead<T>>) -> Result<Vec<u32>> {
    Ok(probe_logits(ex, probe, head)?.argmax_rows()?.into_iter().map(|v| v as u32).collect())
}

/// Accuracy at the labeled rows and the predicted word sequence there.
fn score_aligned(pred: &[u32], targets: &[u32], reference: Vec<u32>) -> SentenceScore {
    let mut accuracy = AccuracyScore::default();
    let mut hypothesis = Vec::new();
    for (&p, &t) in pred.iter().zip(targets) {
        if t == PAD {
            continue;
        }
        accuracy.total += 1;
        accuracy.correct += usize::from(p == t);
        hypothesis.push(p);
    }
    SentenceScore {
        accuracy,
        hypothesis,
        reference,
    }
}

fn check<T: Scalar>(model: &TransformerModel<T>, data: &ProbeDataset<T>) -> Result<()> {
    if !model.is_frozen() {
        return Err(ProbeError::NotFrozen);
    }
    data.check_model(model)
}

fn head_for<T: Scalar>(model: &TransformerModel<T>, probe: &ProbeParams<T>) -> Option<OutputHead<T>> {
    (probe.head == HeadKind::Shared).then(|| OutputHead::from_model(model))
}

/// Aligned encoder probe: target-order predictions scored by accuracy at
/// every reference word and by BLEU of the predicted word sequence.
pub fn probe_encoder<T: Scalar>(
    model: &TransformerModel<T>,
    probe: &ProbeParams<T>,
    data: &ProbeDataset<T>,
    point: EncoderPoint,
) -> Result<SubsetEval> {
    check(model, data)?;
    if probe.mode != ProbeMode::Aligned {
        return Err(ProbeError::Config("probe_encoder needs an aligned probe".into()));
    }
    let head = head_for(model, probe);
    let examples = data.examples(point, ProbeMode::Aligned)?;
    let sentences = examples
        .iter()
        .zip(&data.pairs)
        .map(|(ex, pair)| {
            let pred = probe_predictions(ex, probe, head.as_ref())?;
            Ok(score_aligned(&pred, &ex.targets, reference_words(&pair.target)))
        })
        .collect::<Result<_>>()?;
    Ok(SubsetEval { sentences })
}

/// Unaligned encoder probe: the argmax at every source word position forms
/// the hypothesis, scored against the reference words by BLEU only.
pub fn probe_encoder_no_cross<T: Scalar>(
    model: &TransformerModel<T>,
    probe: &ProbeParams<T>,
    data: &ProbeDataset<T>,
    point: EncoderPoint,
) -> Result<SubsetEval> {
    check(model, data)?;
    if probe.mode != ProbeMode::NoCross {
        return Err(ProbeError::Config("probe_encoder_no_cross needs a no-cross probe".into()));
    }
    let head = head_for(model, probe);
    let examples = data.examples(point, ProbeMode::NoCross)?;
    let sentences = examples
        .iter()
        .zip(&data.pairs)
        .map(|(ex, pair)| {
            let pred = probe_predictions(ex, probe, head.as_ref())?;
            let words = pair.source.iter().filter(|&&t| t != EOS).count();
            Ok(SentenceScore {
                accuracy: AccuracyScore::default(),
                hypothesis: pred[..words.min(pred.len())].to_vec(),
                reference: reference_words(&pair.target),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SubsetEval { sentences })
}

/// Decoder layer `layer` (1-based) read through the model's own output
/// head under `variant`; no parameters are trained.
pub fn probe_decoder<T: Scalar>(
    model: &TransformerModel<T>,
    data: &ProbeDataset<T>,
    layer: usize,
    variant: DecoderVariant,
) -> Result<SubsetEval> {
    check(model, data)?;
    let sentences = data
        .pairs
        .iter()
        .zip(&data.traces)
        .map(|(pair, tr)| {
            let states = tr
                .decoder(layer, variant)
                .ok_or_else(|| ProbeError::Config(format!("decoder layer {layer} not traced")))?;
            let pred: Vec<u32> = model
                .head_logits(states)?
                .argmax_rows()?
                .into_iter()
                .map(|v| v as u32)
                .collect();
            Ok(score_aligned(&pred, &aligned_targets(&pair.target), reference_words(&pair.target)))
        })
        .collect::<Result<_>>()?;
    Ok(SubsetEval { sentences })
}
