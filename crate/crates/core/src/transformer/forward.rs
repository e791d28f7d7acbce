use serde::{Deserialize, Serialize};

use super::model::{AttnIx, FfnIx, LnIx};
use super::{TransformerError, TransformerModel};
use crate::corpus::{BOS, PAD};
use crate::numerics::rng::StreamRng;
use crate::numerics::{Graph, Reduction, Scalar, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

type Result<T> = std::result::Result<T, TransformerError>;

/// Encoder trace point. Layers are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPoint {
    /// Scaled token embedding plus position encoding.
    Embedding,
    /// Residual stream after the self-attention sublayer of a layer.
    SelfAttn(usize),
    /// Layer output.
    Layer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Standard,
    /// The layer's self-attention sublayer replaced by the identity.
    NoSelfAttn,
    /// The layer's cross-attention sublayer replaced by the identity.
    NoCrossAttn,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 3] = [Self::Standard, Self::NoSelfAttn, Self::NoCrossAttn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::NoSelfAttn => "no_self_att",
            Self::NoCrossAttn => "no_cross_att",
        }
    }
}

/// Every intermediate state of one teacher-forced forward pass.
///
/// Ablated decoder variants of layer `j` take the standard input of layer
/// `j`; layer `j + 1` always continues from the standard output.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T: Scalar = f32> {
    pub embedding: Tensor<T>,
    pub enc_self: Vec<Tensor<T>>,
    pub enc_layers: Vec<Tensor<T>>,
    /// Normalized final encoder output seen by cross-attention.
    pub memory: Tensor<T>,
    pub dec_embedding: Tensor<T>,
    pub dec_standard: Vec<Tensor<T>>,
    pub dec_no_self: Vec<Tensor<T>>,
    pub dec_no_cross: Vec<Tensor<T>>,
    /// Cross-attention weights, index `layer * n_heads + head`, each
    /// `target_len × source_len`.
    pub cross_attn: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerTrace<T> {
    pub fn encoder(&self, point: EncoderPoint) -> Option<&Tensor<T>> {
        match point {
            EncoderPoint::Embedding => Some(&self.embedding),
            EncoderPoint::SelfAttn(i) => i.checked_sub(1).and_then(|i| self.enc_self.get(i)),
            EncoderPoint::Layer(i) => i.checked_sub(1).and_then(|i| self.enc_layers.get(i)),
        }
    }

    /// Output of decoder layer `layer` (1-based) under `variant`.
    pub fn decoder(&self, layer: usize, variant: DecoderVariant) -> Option<&Tensor<T>> {
        let list = match variant {
            DecoderVariant::Standard => &self.dec_standard,
            DecoderVariant::NoSelfAttn => &self.dec_no_self,
            DecoderVariant::NoCrossAttn => &self.dec_no_cross,
        };
        layer.checked_sub(1).and_then(|i| list.get(i))
    }

    /// Standard input of decoder layer `layer` (1-based).
    pub fn decoder_input(&self, layer: usize) -> Option<&Tensor<T>> {
        match layer {
            0 => None,
            1 => Some(&self.dec_embedding),
            l => self.dec_standard.get(l - 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T: Scalar = f32> {
    /// Row `t` scores the token following `target_prefix[..=t]`.
    pub logits: Tensor<T>,
    pub trace: Option<LayerTrace<T>>,
}

/// Builds model computations on a graph. Parameters are bound once, either
/// as trainable leaves or as constants.
pub(crate) struct Runner<'m, 'r, T: Scalar> {
    pub model: &'m TransformerModel<T>,
    pub g: Graph<T>,
    pub p: Vec<Var>,
    dropout: f64,
    rng: Option<&'r mut StreamRng>,
}

impl<'m, 'r, T: Scalar> Runner<'m, 'r, T> {
    pub fn new(model: &'m TransformerModel<T>, trainable: bool) -> Self {
        let mut g = Graph::new();
        let p = model
            .params()
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        Self {
            model,
            g,
            p,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn with_dropout(mut self, rate: f64, rng: &'r mut StreamRng) -> Self {
        self.dropout = rate;
        self.rng = Some(rng);
        self
    }

    fn drop(&mut self, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => self.g.dropout(x, self.dropout, rng),
            _ => x,
        }
    }

    fn ln(&mut self, x: Var, ix: LnIx) -> Result<Var> {
        Ok(self.g.layer_norm(x, self.p[ix.gain], self.p[ix.bias], T::from_f64(LN_EPS))?)
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = self.g.matmul(x, self.p[w])?;
        Ok(self.g.add_row(y, self.p[b])?)
    }

    fn mha(&mut self, q_in: Var, kv_in: Var, ix: AttnIx, causal: bool, capture: Option<&mut Vec<Tensor<T>>>) -> Result<Var> {
        let cfg = self.model.config();
        let dh = cfg.head_dim();
        let q = self.linear(q_in, ix.wq, ix.bq)?;
        let k = self.linear(kv_in, ix.wk, ix.bk)?;
        let v = self.linear(kv_in, ix.wv, ix.bv)?;
        let tq = self.g.shape(q)[0];
        let tk = self.g.shape(k)[0];
        let mask: Option<Vec<bool>> = causal.then(|| (0..tq * tk).map(|i| i % tk > i / tk).collect());
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut captured = Vec::new();
        for h in 0..cfg.n_heads {
            let qh = self.g.slice_cols(q, h * dh, dh)?;
            let kh = self.g.slice_cols(k, h * dh, dh)?;
            let vh = self.g.slice_cols(v, h * dh, dh)?;
            let scores = self.g.matmul_nt(qh, kh)?;
            let mut scores = self.g.scale(scores, scale);
            if let Some(m) = &mask {
                scores = self.g.mask_fill(scores, m)?;
            }
            let probs = self.g.softmax(scores, 1)?;
            if capture.is_some() {
                captured.push(self.g.value(probs).clone().with_requires_grad(false));
            }
            heads.push(self.g.matmul(probs, vh)?);
        }
        if let Some(c) = capture {
            c.extend(captured);
        }
        let ctx = self.g.concat_cols(&heads)?;
        self.linear(ctx, ix.wo, ix.bo)
    }

    fn ffn(&mut self, x: Var, ix: FfnIx) -> Result<Var> {
        let h = self.linear(x, ix.w1, ix.b1)?;
        let h = self.g.relu(h);
        self.linear(h, ix.w2, ix.b2)
    }

    fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let sub = self.drop(sub);
        Ok(self.g.add(x, sub)?)
    }

    pub fn embed(&mut self, ids: &[u32]) -> Result<Var> {
        let d = self.model.config().d_model;
        let e = self.g.embedding(self.p[self.model.layout().embed], ids)?;
        let e = self.g.scale(e, T::from_f64((d as f64).sqrt()));
        let pe = Tensor::new(vec![ids.len(), d], self.model.positions.data()[..ids.len() * d].to_vec())?;
        let pe = self.g.constant(pe);
        let x = self.g.add(e, pe)?;
        Ok(self.drop(x))
    }

    /// Returns `(s_i, h_i)` for encoder layer `i` (0-based).
    pub fn enc_layer(&mut self, i: usize, x: Var) -> Result<(Var, Var)> {
        let ix = self.model.layout().enc[i];
        let n = self.ln(x, ix.ln1)?;
        let a = self.mha(n, n, ix.self_attn, false, None)?;
        let s = self.residual(x, a)?;
        let n = self.ln(s, ix.ln2)?;
        let f = self.ffn(n, ix.ffn)?;
        let h = self.residual(s, f)?;
        Ok((s, h))
    }

    pub fn dec_self_block(&mut self, j: usize, x: Var) -> Result<Var> {
        let ix = self.model.layout().dec[j];
        let n = self.ln(x, ix.ln1)?;
        let a = self.mha(n, n, ix.self_attn, true, None)?;
        self.residual(x, a)
    }

    pub fn dec_cross_block(&mut self, j: usize, x: Var, memory: Var, capture: Option<&mut Vec<Tensor<T>>>) -> Result<Var> {
        let ix = self.model.layout().dec[j];
        let n = self.ln(x, ix.ln2)?;
        let a = self.mha(n, memory, ix.cross_attn, false, capture)?;
        self.residual(x, a)
    }

    pub fn dec_ffn_block(&mut self, j: usize, x: Var) -> Result<Var> {
        let ix = self.model.layout().dec[j];
        let n = self.ln(x, ix.ln3)?;
        let f = self.ffn(n, ix.ffn)?;
        self.residual(x, f)
    }

    /// Final decoder norm followed by the tied embedding projection.
    pub fn head(&mut self, x: Var) -> Result<Var> {
        let n = self.ln(x, self.model.layout().dec_ln)?;
        Ok(self.g.matmul_nt(n, self.p[self.model.layout().embed])?)
    }

    pub fn encode(&mut self, source: &[u32], mut trace: Option<&mut LayerTrace<T>>) -> Result<Var> {
        let mut x = self.embed(source)?;
        if let Some(t) = trace.as_deref_mut() {
            t.embedding = self.g.value(x).clone();
        }
        for i in 0..self.model.config().n_enc_layers {
            let (s, h) = self.enc_layer(i, x)?;
            if let Some(t) = trace.as_deref_mut() {
                t.enc_self.push(self.g.value(s).clone());
                t.enc_layers.push(self.g.value(h).clone());
            }
            x = h;
        }
        let m = self.ln(x, self.model.layout().enc_ln)?;
        if let Some(t) = trace {
            t.memory = self.g.value(m).clone();
        }
        Ok(m)
    }

    /// Teacher-forced decoder; returns logits.
    pub fn decode(&mut self, prefix: &[u32], memory: Var, mut trace: Option<&mut LayerTrace<T>>) -> Result<Var> {
        let mut x = self.embed(prefix)?;
        if let Some(t) = trace.as_deref_mut() {
            t.dec_embedding = self.g.value(x).clone();
        }
        for j in 0..self.model.config().n_dec_layers {
            let a = self.dec_self_block(j, x)?;
            let b = self.dec_cross_block(j, a, memory, trace.as_deref_mut().map(|t| &mut t.cross_attn))?;
            let out = self.dec_ffn_block(j, b)?;
            if let Some(t) = trace.as_deref_mut() {
                t.dec_standard.push(self.g.value(out).clone());
                let b = self.dec_cross_block(j, x, memory, None)?;
                let no_self = self.dec_ffn_block(j, b)?;
                t.dec_no_self.push(self.g.value(no_self).clone());
                let no_cross = self.dec_ffn_block(j, a)?;
                t.dec_no_cross.push(self.g.value(no_cross).clone());
            }
            x = out;
        }
        self.head(x)
    }
}

fn empty_trace<T: Scalar>() -> LayerTrace<T> {
    let z = || Tensor::zeros(&[0, 0]);
    LayerTrace {
        embedding: z(),
        enc_self: Vec::new(),
        enc_layers: Vec::new(),
        memory: z(),
        dec_embedding: z(),
        dec_standard: Vec::new(),
        dec_no_self: Vec::new(),
        dec_no_cross: Vec::new(),
        cross_attn: Vec::new(),
    }
}

impl<T: Scalar> TransformerModel<T> {
    /// Deterministic forward pass without dropout.
    pub fn forward(&self, source: &[u32], target_prefix: &[u32], trace: bool) -> Result<ForwardOutput<T>> {
        self.check_ids(source)?;
        self.check_ids(target_prefix)?;
        let mut r = Runner::new(self, false);
        let mut tr = trace.then(empty_trace);
        let mem = r.encode(source, tr.as_mut())?;
        let logits = r.decode(target_prefix, mem, tr.as_mut())?;
        Ok(ForwardOutput {
            logits: r.g.value(logits).clone(),
            trace: tr,
        })
    }

    /// Traced teacher-forced pass over a reference target ending in eos;
    /// the decoder input is `bos` followed by all but the last target token.
    pub fn trace_pair(&self, source: &[u32], target: &[u32]) -> Result<LayerTrace<T>> {
        let out = self.forward(source, &teacher_prefix(target), true)?;
        Ok(out.trace.expect("trace requested"))
    }

    /// Teacher-forced token cross-entropy, summed over target positions,
    /// built on `g` from parameter handles in layout order. Used to check
    /// gradients against perturbed parameter copies.
    pub fn loss_on_graph(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        source: &[u32],
        target: &[u32],
        label_smoothing: f64,
    ) -> Result<Var> {
        if params.len() != self.params().len() {
            return Err(TransformerError::Config(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params().len()
            )));
        }
        self.check_ids(source)?;
        self.check_ids(target)?;
        let mut r = Runner {
            model: self,
            g: std::mem::take(g),
            p: params.to_vec(),
            dropout: 0.0,
            rng: None,
        };
        let out = (|| {
            let mem = r.encode(source, None)?;
            let logits = r.decode(&teacher_prefix(target), mem, None)?;
            Ok(r.g.cross_entropy(logits, target, PAD, Reduction::Sum, label_smoothing)?)
        })();
        *g = r.g;
        out
    }

    /// Self-attention sublayer of decoder layer `layer` (0-based) with its
    /// residual connection, on a fresh graph.
    pub fn decoder_self_block(&self, layer: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.block(|r, x, _| r.dec_self_block(layer, x), x, None)
    }

    pub fn decoder_cross_block(&self, layer: usize, x: &Tensor<T>, memory: &Tensor<T>) -> Result<Tensor<T>> {
        self.block(|r, x, m| r.dec_cross_block(layer, x, m.expect("memory"), None), x, Some(memory))
    }

    pub fn decoder_ffn_block(&self, layer: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.block(|r, x, _| r.dec_ffn_block(layer, x), x, None)
    }

    /// Output-head logits for arbitrary `n × d_model` states.
    pub fn head_logits(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        self.block(|r, x, _| r.head(x), states, None)
    }

    fn block<F>(&self, f: F, x: &Tensor<T>, memory: Option<&Tensor<T>>) -> Result<Tensor<T>>
    where
        F: FnOnce(&mut Runner<'_, '_, T>, Var, Option<Var>) -> Result<Var>,
    {
        if x.ndim() != 2 || x.shape()[1] != self.config().d_model {
            return Err(TransformerError::Config(format!(
                "state shape {:?} does not match d_model {}",
                x.shape(),
                self.config().d_model
            )));
        }
        let mut r = Runner::new(self, false);
        let xv = r.g.constant(x.clone());
        let mv = memory.map(|m| r.g.constant(m.clone()));
        let out = f(&mut r, xv, mv)?;
        Ok(r.g.value(out).clone())
    }
}

/// `bos` followed by `target` without its last token.
pub(crate) fn teacher_prefix(target: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(target.len());
    p.push(BOS);
    p.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    p
}
