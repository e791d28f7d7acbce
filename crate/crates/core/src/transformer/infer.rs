use super::beam::StepScorer;
use super::forward::{Runner, LN_EPS};
use super::model::{AttnIx, FfnIx, LnIx};
use super::{TransformerError, TransformerModel};
use crate::numerics::{kernels, Scalar, Tensor};

/// Encoder output plus the cross-attention keys and values of every
/// decoder layer, computed once per source sentence.
#[derive(Clone, Debug)]
pub struct EncodedSource<T: Scalar = f32> {
    pub memory: Tensor<T>,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

impl<T: Scalar> EncodedSource<T> {
    pub fn source_len(&self) -> usize {
        self.memory.shape()[0]
    }
}

/// Self-attention key/value cache of a partial hypothesis.
#[derive(Clone, Debug, Default)]
pub struct DecodeState<T: Scalar = f32> {
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> DecodeState<T> {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn ln_row<T: Scalar>(x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rs = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
    x.iter().zip(g).zip(b).map(|((&v, &g), &b)| (v - mean) * rs * g + b).collect()
}

impl<T: Scalar> TransformerModel<T> {
    fn p(&self, i: usize) -> &[T] {
        self.params()[i].data()
    }

    fn ln_vec(&self, x: &[T], ix: LnIx) -> Vec<T> {
        ln_row(x, self.p(ix.gain), self.p(ix.bias))
    }

    /// `x · W + b` for `rows` stacked row vectors.
    fn affine(&self, x: &[T], rows: usize, w: usize, b: usize) -> Vec<T> {
        let shape = self.params()[w].shape();
        let (k, n) = (shape[0], shape[1]);
        let mut y = kernels::matmul(x, self.p(w), rows, k, n);
        let bias = self.p(b);
        for r in 0..rows {
            for (v, &bb) in y[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *v += bb;
            }
        }
        y
    }

    fn ffn_vec(&self, x: &[T], ix: FfnIx) -> Vec<T> {
        let h: Vec<T> = self
            .affine(x, 1, ix.w1, ix.b1)
            .into_iter()
            .map(|v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.affine(&h, 1, ix.w2, ix.b2)
    }

    /// Attention of one query row over `len` cached key/value rows.
    fn attend(&self, q: &[T], keys: &[T], values: &[T], len: usize, ix: AttnIx) -> Vec<T> {
        let d = self.config().d_model;
        let dh = self.config().head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut ctx = vec![T::zero(); d];
        let mut scores = vec![T::zero(); len];
        for h in 0..self.config().n_heads {
            let off = h * dh;
            for (t, s) in scores.iter_mut().enumerate() {
                *s = kernels::dot(&q[off..off + dh], &keys[t * d + off..t * d + off + dh]) * scale;
            }
            let probs = kernels::softmax(&scores, &[len], 0);
            for (t, &p) in probs.iter().enumerate() {
                for c in 0..dh {
                    ctx[off + c] += p * values[t * d + off + c];
                }
            }
        }
        self.affine(&ctx, 1, ix.wo, ix.bo)
    }

    /// Runs the encoder and precomputes cross-attention keys and values.
    pub fn encode_source(&self, source: &[u32]) -> Result<EncodedSource<T>, TransformerError> {
        self.check_ids(source)?;
        let mut r = Runner::new(self, false);
        let m = r.encode(source, None)?;
        let memory = r.g.value(m).clone();
        let s = source.len();
        let (mut cross_k, mut cross_v) = (Vec::new(), Vec::new());
        for ix in &self.layout().dec {
            cross_k.push(self.affine(memory.data(), s, ix.cross_attn.wk, ix.cross_attn.bk));
            cross_v.push(self.affine(memory.data(), s, ix.cross_attn.wv, ix.cross_attn.bv));
        }
        Ok(EncodedSource {
            memory,
            cross_k,
            cross_v,
        })
    }

    pub fn decode_start(&self) -> DecodeState<T> {
        let n = self.config().n_dec_layers;
        DecodeState {
            self_k: vec![Vec::new(); n],
            self_v: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Consumes `token` at the next position and returns the logits of the
    /// token after it.
    pub fn decode_step(&self, enc: &EncodedSource<T>, state: &mut DecodeState<T>, token: u32) -> Result<Vec<T>, TransformerError> {
        let cfg = self.config();
        let d = cfg.d_model;
        let pos = state.len;
        if pos >= cfg.max_len {
            return Err(TransformerError::Length {
                len: pos + 1,
                max: cfg.max_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(TransformerError::Token {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        let lay = self.layout();
        let emb = &self.p(lay.embed)[token as usize * d..(token as usize + 1) * d];
        let pe = &self.positions.data()[pos * d..(pos + 1) * d];
        let sd = T::from_f64((d as f64).sqrt());
        let mut x: Vec<T> = emb.iter().zip(pe).map(|(&e, &p)| e * sd + p).collect();
        let src_len = enc.source_len();
        for (j, ix) in lay.dec.iter().enumerate() {
            let n = self.ln_vec(&x, ix.ln1);
            let a = ix.self_attn;
            let q = self.affine(&n, 1, a.wq, a.bq);
            state.self_k[j].extend(self.affine(&n, 1, a.wk, a.bk));
            state.self_v[j].extend(self.affine(&n, 1, a.wv, a.bv));
            let out = self.attend(&q, &state.self_k[j], &state.self_v[j], pos + 1, a);
            add_assign(&mut x, &out);

            let n = self.ln_vec(&x, ix.ln2);
            let c = ix.cross_attn;
            let q = self.affine(&n, 1, c.wq, c.bq);
            let out = self.attend(&q, &enc.cross_k[j], &enc.cross_v[j], src_len, c);
            add_assign(&mut x, &out);

            let n = self.ln_vec(&x, ix.ln3);
            let out = self.ffn_vec(&n, ix.ffn);
            add_assign(&mut x, &out);
        }
        state.len += 1;
        let n = self.ln_vec(&x, lay.dec_ln);
        Ok(kernels::matmul_nt(&n, self.p(lay.embed), 1, d, cfg.vocab_size))
    }
}

fn add_assign<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Adapts a model and an encoded source to [`StepScorer`].
pub struct ModelScorer<'a, T: Scalar = f32> {
    pub model: &'a TransformerModel<T>,
    pub source: EncodedSource<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a TransformerModel<T>, source: &[u32]) -> Result<Self, TransformerError> {
        Ok(Self {
            model,
            source: model.encode_source(source)?,
        })
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    type State = DecodeState<T>;

    fn initial(&self) -> Self::State {
        self.model.decode_start()
    }

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>, TransformerError> {
        let logits: Vec<f64> = self
            .model
            .decode_step(&self.source, state, token)?
            .into_iter()
            .map(T::as_f64)
            .collect();
        Ok(kernels::log_softmax_rows(&logits, 1, logits.len()))
    }
}
