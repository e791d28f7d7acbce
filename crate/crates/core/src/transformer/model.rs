use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{ModelConfig, TransformerError};
use crate::numerics::{rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LnIx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    /// Output projection.
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnIx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncIx {
    pub ln1: LnIx,
    pub self_attn: AttnIx,
    pub ln2: LnIx,
    pub ffn: FfnIx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecIx {
    pub ln1: LnIx,
    pub self_attn: AttnIx,
    pub ln2: LnIx,
    pub cross_attn: AttnIx,
    pub ln3: LnIx,
    pub ffn: FfnIx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Ones,
    Zeros,
    Xavier,
    Embedding,
}

/// Names, shapes and positions of every parameter, in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    /// Shared source/target embedding, also the output projection.
    pub embed: usize,
    pub enc: Vec<EncIx>,
    pub enc_ln: LnIx,
    pub dec: Vec<DecIx>,
    /// Final decoder norm, part of the output head.
    pub dec_ln: LnIx,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIx {
        LnIx {
            gain: self.push(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIx {
        let mut pair = |n: &str| {
            (
                self.push(format!("{prefix}.w{n}"), vec![d, d], Init::Xavier),
                self.push(format!("{prefix}.b{n}"), vec![d], Init::Zeros),
            )
        };
        let (wq, bq) = pair("q");
        let (wk, bk) = pair("k");
        let (wv, bv) = pair("v");
        let (wo, bo) = pair("o");
        AttnIx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIx {
        FfnIx {
            w1: self.push(format!("{prefix}.w1"), vec![d, f], Init::Xavier),
            b1: self.push(format!("{prefix}.b1"), vec![f], Init::Zeros),
            w2: self.push(format!("{prefix}.w2"), vec![f, d], Init::Xavier),
            b2: self.push(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let embed = b.push("embed".into(), vec![cfg.vocab_size, d], Init::Embedding);
        let enc = (0..cfg.n_enc_layers)
            .map(|i| EncIx {
                ln1: b.ln(&format!("enc.{i}.ln1"), d),
                self_attn: b.attn(&format!("enc.{i}.self_attn"), d),
                ln2: b.ln(&format!("enc.{i}.ln2"), d),
                ffn: b.ffn(&format!("enc.{i}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec = (0..cfg.n_dec_layers)
            .map(|i| DecIx {
                ln1: b.ln(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self_attn"), d),
                ln2: b.ln(&format!("dec.{i}.ln2"), d),
                cross_attn: b.attn(&format!("dec.{i}.cross_attn"), d),
                ln3: b.ln(&format!("dec.{i}.ln3"), d),
                ffn: b.ffn(&format!("dec.{i}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        Self {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Model parameters plus the frozen flag. While frozen, every mutating
/// method fails with [`TransformerError::Frozen`].
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    frozen: bool,
    pub(crate) positions: Tensor<T>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Random initialization from the `model/init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TransformerError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = rng::stream(seed, "model/init");
        let emb_std = (config.d_model as f64).powf(-0.5);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::Ones => vec![T::one(); n],
                    Init::Zeros => vec![T::zero(); n],
                    Init::Xavier => {
                        let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| T::from_f64(rng.random_range(-a..a))).collect()
                    }
                    Init::Embedding => {
                        let normal = Normal::new(0.0, emb_std).expect("positive std");
                        (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                    }
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_params(config, params)
    }

    /// Assembles a model from tensors in layout order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self, TransformerError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(TransformerError::Incompatible(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((p, shape), name) in params.iter().zip(&layout.shapes).zip(&layout.names) {
            if p.shape() != shape.as_slice() {
                return Err(TransformerError::Incompatible(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        let index = layout.names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        let positions = sinusoidal(config.max_len, config.d_model);
        Ok(Self {
            config,
            layout,
            params,
            index,
            frozen: false,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.layout.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params_mut(&mut self) -> Result<&mut [Tensor<T>], TransformerError> {
        if self.frozen {
            return Err(TransformerError::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), TransformerError> {
        if self.frozen {
            return Err(TransformerError::Frozen);
        }
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| TransformerError::UnknownParam(name.to_string()))?;
        if value.shape() != self.params[i].shape() {
            return Err(TransformerError::Incompatible(format!(
                "{name}: shape {:?}, expected {:?}",
                value.shape(),
                self.params[i].shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    /// Same parameters in another precision; the frozen flag is kept.
    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        let mut m = TransformerModel::from_params(self.config.clone(), self.params.iter().map(Tensor::cast).collect())
            .expect("layout unchanged");
        m.frozen = self.frozen;
        m
    }

    /// SHA-256 over the config, parameter names, shapes and values as
    /// little-endian `f32`.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, p) in self.named_params() {
            h.update(name.as_bytes());
            for &d in p.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<(), TransformerError> {
        if ids.is_empty() {
            return Err(TransformerError::Empty);
        }
        if ids.len() > self.config.max_len {
            return Err(TransformerError::Length {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(TransformerError::Token {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(...)`.
fn sinusoidal<T: Scalar>(max_len: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); max_len * d];
    for p in 0..max_len {
        for i in 0..d {
            let expo = (2 * (i / 2)) as f64 / d as f64;
            let angle = p as f64 / 10000f64.powf(expo);
            data[p * d + i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![max_len, d], data).expect("shape")
}
