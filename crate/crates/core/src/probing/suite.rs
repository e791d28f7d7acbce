use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    probe_decoder, probe_encoder, probe_encoder_no_cross, train_probe, ProbeDataset, ProbeError, ProbeMode, ProbeParams,
    ProbeTrainConfig, Result, SubsetEval,
};
use crate::metrics::AccuracyScore;
use crate::numerics::{rng, Scalar};
use crate::transformer::{DecoderVariant, EncoderPoint, TransformerModel};

/// Which encoder state a layer row probes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderState {
    /// Layer output `h_i`.
    #[default]
    Layer,
    /// Residual stream after self-attention, `s_i`.
    SelfAttn,
}

impl EncoderState {
    /// Trace point of layer row `layer`; row 0 is the embedding.
    pub fn point(self, layer: usize) -> EncoderPoint {
        match (layer, self) {
            (0, _) => EncoderPoint::Embedding,
            (l, EncoderState::Layer) => EncoderPoint::Layer(l),
            (l, EncoderState::SelfAttn) => EncoderPoint::SelfAttn(l),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    EncoderAligned,
    EncoderNoCross,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    /// In-domain test split.
    InDomain,
    /// Full out-of-domain test split.
    All,
    /// Hallucinated part of `All`.
    Hallu,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::InDomain => "in_domain",
            Subset::All => "all",
            Subset::Hallu => "hallu",
        }
    }
}

/// One evaluated probe on one subset. Metrics are in `[0, 1]`; `None`
/// marks an undefined value such as accuracy over an empty subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub section: Section,
    /// 0 is the embedding layer.
    pub layer: usize,
    pub variant: Option<DecoderVariant>,
    pub subset: Subset,
    pub sentences: usize,
    pub accuracy: Option<f64>,
    pub bleu: Option<f64>,
    pub unigram_bleu: Option<f64>,
}

impl ProbeCell {
    fn new(section: Section, layer: usize, variant: Option<DecoderVariant>, subset: Subset, eval: &SubsetEval) -> Self {
        let unaligned = section == Section::EncoderNoCross;
        Self {
            section,
            layer,
            variant,
            subset,
            sentences: eval.len(),
            accuracy: if unaligned { None } else { eval.accuracy() },
            bleu: eval.bleu(),
            unigram_bleu: if unaligned { eval.unigram_bleu() } else { None },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeResultTable {
    pub cells: Vec<ProbeCell>,
}

impl ProbeResultTable {
    pub fn get(&self, section: Section, layer: usize, variant: Option<DecoderVariant>, subset: Subset) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| c.section == section && c.layer == layer && c.variant == variant && c.subset == subset)
    }

    pub fn section(&self, section: Section) -> impl Iterator<Item = &ProbeCell> {
        self.cells.iter().filter(move |c| c.section == section)
    }

    /// Sorted distinct layers present in `section`.
    pub fn layers(&self, section: Section) -> Vec<usize> {
        let mut l: Vec<usize> = self.section(section).map(|c| c.layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

/// Percentile interval of `Hallu − All` over sentence resamples of `All`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub delta: f64,
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    /// Resamples without a scored hallucinated sentence, left out.
    pub skipped: usize,
}

impl BootstrapCi {
    pub fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBootstrap {
    pub section: Section,
    pub layer: usize,
    pub accuracy: BootstrapCi,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bootstrap of the micro-accuracy gap between the flagged sentences and
/// all sentences. Sentences are drawn with replacement from `all`; both
/// accuracies are recomputed on every draw. `None` when nothing is flagged.
pub fn bootstrap_delta(all: &SubsetEval, hallu: &[bool], resamples: usize, seed: u64) -> Option<BootstrapCi> {
    let acc = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut a, mut h) = (AccuracyScore::default(), AccuracyScore::default());
        for i in idx {
            a += all.sentences[i].accuracy;
            if hallu[i] {
                h += all.sentences[i].accuracy;
            }
        }
        Some(h.value()? - a.value()?)
    };
    let n = all.len();
    let delta = acc(&mut (0..n))?;
    let mut r = rng::stream(seed, "probe/bootstrap");
    let mut deltas = Vec::with_capacity(resamples);
    let mut skipped = 0;
    for _ in 0..resamples {
        let draw: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        match acc(&mut draw.into_iter()) {
            Some(d) => deltas.push(d),
            None => skipped += 1,
        }
    }
    if deltas.is_empty() {
        return None;
    }
    deltas.sort_by(f64::total_cmp);
    Some(BootstrapCi {
        delta,
        lo: percentile(&deltas, 0.025),
        hi: percentile(&deltas, 0.975),
        resamples,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSuiteConfig {
    /// Encoder rows to probe, 0 being the embedding; all when absent.
    #[serde(default)]
    pub encoder_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub encoder_state: EncoderState,
    pub aligned: bool,
    pub no_cross: bool,
    pub decoder: bool,
    /// Decoder layers (1-based); all when absent.
    #[serde(default)]
    pub decoder_layers: Option<Vec<usize>>,
    pub variants: Vec<DecoderVariant>,
    pub train: ProbeTrainConfig,
    pub bootstrap_resamples: usize,
}

impl Default for ProbeSuiteConfig {
    fn default() -> Self {
        Self {
            encoder_layers: None,
            encoder_state: EncoderState::Layer,
            aligned: true,
            no_cross: true,
            decoder: true,
            decoder_layers: None,
            variants: DecoderVariant::ALL.to_vec(),
            train: ProbeTrainConfig::default(),
            bootstrap_resamples: 1000,
        }
    }
}

/// Evaluation subsets. `hallu` indexes into `all`.
#[derive(Clone, Copy, Debug)]
pub struct EvalSets<'a, T: Scalar = f32> {
    pub in_domain: Option<&'a ProbeDataset<T>>,
    pub all: &'a ProbeDataset<T>,
    pub hallu: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedProbe<T: Scalar = f32> {
    pub section: Section,
    pub layer: usize,
    pub params: ProbeParams<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSuiteResult {
    pub model_checksum: String,
    pub hallu_count: usize,
    pub all_count: usize,
    pub table: ProbeResultTable,
    pub bootstrap: Vec<LayerBootstrap>,
}

fn layer_list(requested: &Option<Vec<usize>>, first: usize, last: usize, what: &str) -> Result<Vec<usize>> {
    match requested {
        None => Ok((first..=last).collect()),
        Some(ls) => {
            if let Some(&bad) = ls.iter().find(|&&l| l < first || l > last) {
                return Err(ProbeError::Config(format!("{what} layer {bad} outside {first}..={last}")));
            }
            Ok(ls.clone())
        }
    }
}

/// Trains every requested probe on `train` and evaluates it on each subset.
///
/// Cells are emitted in a fixed order: section, layer, variant, subset.
pub fn run_probe_suite<T: Scalar>(
    model: &TransformerModel<T>,
    train: &ProbeDataset<T>,
    sets: EvalSets<'_, T>,
    cfg: &ProbeSuiteConfig,
) -> Result<(ProbeSuiteResult, Vec<TrainedProbe<T>>)> {
    if !model.is_frozen() {
        return Err(ProbeError::NotFrozen);
    }
    let before = model.checksum();
    for d in [Some(train), sets.in_domain, Some(sets.all)].into_iter().flatten() {
        d.check_model(model)?;
    }
    if let Some(&bad) = sets.hallu.iter().find(|&&i| i >= sets.all.len()) {
        return Err(ProbeError::Config(format!("hallucination index {bad} outside the evaluated split")));
    }
    let n_enc = model.config().n_enc_layers;
    let n_dec = model.config().n_dec_layers;
    let enc_layers = layer_list(&cfg.encoder_layers, 0, n_enc, "encoder")?;
    let dec_layers = layer_list(&cfg.decoder_layers, 1, n_dec, "decoder")?;
    let mut flags = vec![false; sets.all.len()];
    for &i in sets.hallu {
        flags[i] = true;
    }

    let mut cells = Vec::new();
    let mut probes = Vec::new();
    let mut boots = Vec::new();
    let emit = |cells: &mut Vec<ProbeCell>,
                    section: Section,
                    layer: usize,
                    variant: Option<DecoderVariant>,
                    eval: &dyn Fn(&ProbeDataset<T>) -> Result<SubsetEval>|
     -> Result<SubsetEval> {
        if let Some(d) = sets.in_domain {
            cells.push(ProbeCell::new(section, layer, variant, Subset::InDomain, &eval(d)?));
        }
        let all = eval(sets.all)?;
        cells.push(ProbeCell::new(section, layer, variant, Subset::All, &all));
        cells.push(ProbeCell::new(section, layer, variant, Subset::Hallu, &all.subset(sets.hallu)));
        Ok(all)
    };

    let modes = [(cfg.aligned, Section::EncoderAligned, ProbeMode::Aligned), (cfg.no_cross, Section::EncoderNoCross, ProbeMode::NoCross)];
    for (on, section, mode) in modes {
        if !on {
            continue;
        }
        for &layer in &enc_layers {
            let point = cfg.encoder_state.point(layer);
            log::info!("training {section:?} probe for encoder row {layer}");
            let params = train_probe(model, train, point, mode, &cfg.train)?;
            let all = emit(&mut cells, section, layer, None, &|d| match mode {
                ProbeMode::Aligned => probe_encoder(model, &params, d, point),
                ProbeMode::NoCross => probe_encoder_no_cross(model, &params, d, point),
            })?;
            if mode == ProbeMode::Aligned && cfg.bootstrap_resamples > 0 {
                if let Some(ci) = bootstrap_delta(&all, &flags, cfg.bootstrap_resamples, cfg.train.seed) {
                    boots.push(LayerBootstrap {
                        section,
                        layer,
                        accuracy: ci,
                    });
                }
            }
            probes.push(TrainedProbe { section, layer, params });
        }
    }
    if cfg.decoder {
        for &layer in &dec_layers {
            for &variant in &cfg.variants {
                emit(&mut cells, Section::Decoder, layer, Some(variant), &|d| probe_decoder(model, d, layer, variant))?;
            }
        }
    }

    let after = model.checksum();
    if before != after {
        return Err(ProbeError::ChecksumChanged { before, after });
    }
    Ok((
        ProbeSuiteResult {
            model_checksum: before,
            hallu_count: sets.hallu.len(),
            all_count: sets.all.len(),
            table: ProbeResultTable { cells },
            bootstrap: boots,
        },
        probes,
    ))
}
