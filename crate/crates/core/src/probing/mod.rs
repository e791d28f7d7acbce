//! Word-translation probes on the states of a frozen model.
//!
//! Encoder states are source-ordered, so an aligned probe first maps them
//! into target order with a learned mixture of the decoder's cross-attention
//! maps, then predicts the reference token at every target position. The
//! no-cross probe skips the alignment and reads one word per source
//! position. Decoder probes reuse the model's own output head.

mod dataset;
mod eval;
mod suite;
mod train;

use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};
use crate::transformer::{Blob, Container, ContainerKind, TransformerError, TransformerModel};

pub use dataset::{ProbeDataset, ProbeExample};
pub use eval::{
    probe_decoder, probe_encoder, probe_encoder_no_cross, probe_logits, probe_predictions, SentenceScore, SubsetEval,
};
pub use suite::{
    bootstrap_delta, run_probe_suite, BootstrapCi, EncoderState, EvalSets, LayerBootstrap, ProbeCell, ProbeResultTable, ProbeSuiteConfig,
    ProbeSuiteResult, Section, Subset, TrainedProbe,
};
pub use train::{fit_probe, probe_loss, train_probe, ProbeTrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("probing requires a frozen model")]
    NotFrozen,
    #[error("model checksum changed during probing: {before} -> {after}")]
    ChecksumChanged { before: String, after: String },
    #[error("dataset was traced from model {dataset}, not {model}")]
    StaleDataset { dataset: String, model: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("probe training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("no training examples with supervised positions")]
    NoExamples,
    #[error("probe file: {0}")]
    File(String),
}

type Result<T> = std::result::Result<T, ProbeError>;

/// How probe features reach the vocabulary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `W` is `d_model × d_model` and feeds the model's final norm and tied
    /// output projection.
    #[default]
    Shared,
    /// `W` is `d_model × V` and produces logits directly.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Encoder states mapped to target order through the aggregated
    /// cross-attention matrix.
    Aligned,
    /// Encoder states projected in source order.
    NoCross,
}

/// Trainable probe tensors. Nothing else changes while a probe trains.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams<T: Scalar = f32> {
    pub head: HeadKind,
    pub mode: ProbeMode,
    /// Projection `W`.
    pub proj: Tensor<T>,
    /// Mixture weights `w`, one per decoder layer and head. Empty for
    /// no-cross probes.
    pub mix: Tensor<T>,
}

impl<T: Scalar> ProbeParams<T> {
    /// `W = 0.1·I` for the shared head, zeros for the direct head; `w = 0`.
    pub fn init(head: HeadKind, mode: ProbeMode, d_model: usize, vocab: usize, n_maps: usize) -> Self {
        let proj = match head {
            HeadKind::Shared => Tensor::eye(d_model).map(|v| v * T::from_f64(0.1)),
            HeadKind::Direct => Tensor::zeros(&[d_model, vocab]),
        };
        let mix = match mode {
            ProbeMode::Aligned => Tensor::zeros(&[n_maps]),
            ProbeMode::NoCross => Tensor::zeros(&[0]),
        };
        Self { head, mode, proj, mix }
    }

    pub fn for_model(model: &TransformerModel<T>, head: HeadKind, mode: ProbeMode) -> Self {
        let c = model.config();
        Self::init(head, mode, c.d_model, c.vocab_size, c.n_cross_maps())
    }

    /// Mixture probabilities `softmax(w)`.
    pub fn mixture(&self) -> Vec<T> {
        softmax_vec(self.mix.data())
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let blob = |name: &str, t: &Tensor<T>| Blob {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        };
        Container {
            kind: ContainerKind::Probe,
            meta: serde_json::json!({ "head": self.head, "mode": self.mode, "extra": meta }),
            blobs: vec![blob("W", &self.proj), blob("w", &self.mix)],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::Probe {
            return Err(ProbeError::File("not a probe checkpoint".into()));
        }
        let bad = |k: &str, e: serde_json::Error| ProbeError::File(format!("{k}: {e}"));
        let head: HeadKind = serde_json::from_value(c.meta["head"].clone()).map_err(|e| bad("head", e))?;
        let mode: ProbeMode = serde_json::from_value(c.meta["mode"].clone()).map_err(|e| bad("mode", e))?;
        let tensor = |name: &str| -> Result<Tensor<T>> {
            let b = c
                .blobs
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| ProbeError::File(format!("missing tensor {name}")))?;
            Ok(Tensor::new(b.shape.clone(), b.data.iter().map(|&v| T::from_f64(v as f64)).collect())?)
        };
        Ok(Self {
            head,
            mode,
            proj: tensor("W")?,
            mix: tensor("w")?,
        })
    }
}

fn softmax_vec<T: Scalar>(w: &[T]) -> Vec<T> {
    if w.is_empty() {
        return Vec::new();
    }
    crate::numerics::kernels::softmax(w, &[w.len()], 0)
}

/// Final norm and vocabulary projection shared with the base model.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead<T: Scalar = f32> {
    /// Layer-norm gain and bias applied before the projection, if any.
    pub norm: Option<(Tensor<T>, Tensor<T>)>,
    /// `V × d` table; logits are `x · tableᵀ`.
    pub table: Tensor<T>,
}

impl<T: Scalar> OutputHead<T> {
    pub fn from_model(model: &TransformerModel<T>) -> Self {
        let lay = model.layout();
        let p = model.params();
        Self {
            norm: Some((p[lay.dec_ln.gain].clone(), p[lay.dec_ln.bias].clone())),
            table: p[lay.embed].clone(),
        }
    }

    /// A bare projection without normalization.
    pub fn linear(table: Tensor<T>) -> Self {
        Self { norm: None, table }
    }

    pub(crate) fn bind(&self, g: &mut Graph<T>) -> HeadVars {
        HeadVars {
            norm: self.norm.as_ref().map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone()))),
            table: g.constant(self.table.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadVars {
    norm: Option<(Var, Var)>,
    table: Var,
}

pub(crate) fn apply_head<T: Scalar>(g: &mut Graph<T>, x: Var, head: Option<HeadVars>) -> std::result::Result<Var, NumericsError> {
    match head {
        None => Ok(x),
        Some(h) => {
            let x = match h.norm {
                Some((gain, bias)) => g.layer_norm(x, gain, bias, T::from_f64(crate::transformer::LN_EPS))?,
                None => x,
            };
            g.matmul_nt(x, h.table)
        }
    }
}

/// Stacks `d·k` equally shaped maps into a `d·k × (T·S)` matrix.
pub fn stack_maps<T: Scalar>(maps: &[Tensor<T>]) -> Result<(Tensor<T>, usize, usize)> {
    let first = maps.first().ok_or_else(|| ProbeError::Shape("no cross-attention maps".into()))?;
    let (t, s) = first.dims2()?;
    let mut data = Vec::with_capacity(maps.len() * t * s);
    for (j, m) in maps.iter().enumerate() {
        if m.shape() != first.shape() {
            return Err(ProbeError::Shape(format!(
                "map {j} has shape {:?}, map 0 has {:?}",
                m.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(m.data());
    }
    Ok((Tensor::new(vec![maps.len(), t * s], data)?, t, s))
}

/// `Â = Σ_j softmax(w)_j A_j` on a graph; differentiable in `w`.
pub(crate) fn mix_maps<T: Scalar>(
    g: &mut Graph<T>,
    w: Var,
    stack: Var,
    t: usize,
    s: usize,
) -> std::result::Result<Var, NumericsError> {
    let n = g.value(w).numel();
    let w = g.reshape(w, &[1, n])?;
    let p = g.softmax(w, 1)?;
    let flat = g.matmul(p, stack)?;
    g.reshape(flat, &[t, s])
}

/// Aggregated alignment `Â = Σ_j softmax(w)_j A_j` of the cross-attention
/// maps of every decoder layer and head.
pub fn aggregate_alignment<T: Scalar>(maps: &[Tensor<T>], w: &[T]) -> Result<Tensor<T>> {
    let (stack, t, s) = stack_maps(maps)?;
    if w.len() != maps.len() {
        return Err(ProbeError::Shape(format!("{} weights for {} maps", w.len(), maps.len())));
    }
    let mut g = Graph::new();
    let wv = g.constant(Tensor::vector(w.to_vec()));
    let sv = g.constant(stack);
    let a = mix_maps(&mut g, wv, sv, t, s)?;
    Ok(g.value(a).clone())
}

/// Probe logits `head((Â·h)·W)` for source-ordered states `h[S×d]`.
///
/// `Â` is `T × S` and maps source order to target order. Without a head
/// the projected states are returned as logits.
pub fn align_and_predict<T: Scalar>(
    h: &Tensor<T>,
    a_hat: &Tensor<T>,
    proj: &Tensor<T>,
    head: Option<&OutputHead<T>>,
) -> Result<Tensor<T>> {
    let (_, s) = a_hat.dims2()?;
    let (hs, _) = h.dims2()?;
    if s != hs {
        return Err(ProbeError::Shape(format!("alignment has {s} source columns, states have {hs} rows")));
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let av = g.constant(a_hat.clone());
    let wv = g.constant(proj.clone());
    let t = g.matmul(av, hv)?;
    let x = g.matmul(t, wv)?;
    let hv = head.map(|hd| hd.bind(&mut g));
    let out = apply_head(&mut g, x, hv)?;
    Ok(g.value(out).clone())
}
