//! Versioned binary container for model and probe parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic           8 bytes  "HPROBECK"
//! format_version  u32
//! kind            u32      0 = model, 1 = probe
//! meta_len        u32
//! meta            meta_len bytes of UTF-8 JSON
//! blob_count      u32
//! per blob:
//!   name_len      u32
//!   name          name_len bytes UTF-8
//!   ndim          u32
//!   dims          ndim x u64
//!   data          prod(dims) x f32
//! sha256          32 bytes over everything above
//! ```

use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};

use super::{ModelConfig, TransformerError, TransformerModel};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"HPROBECK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Model,
    Probe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub meta: serde_json::Value,
    pub blobs: Vec<Blob>,
}

fn bad(msg: impl Into<String>) -> TransformerError {
    TransformerError::Checkpoint(msg.into())
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let kind: u32 = match self.kind {
            ContainerKind::Model => 0,
            ContainerKind::Probe => 1,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TransformerError> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let kind = match r.u32()? {
            0 => ContainerKind::Model,
            1 => ContainerKind::Probe,
            k => return Err(bad(format!("unknown kind {k}"))),
        };
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(format!("meta: {e}")))?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("blob name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("blob too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blobs.push(Blob { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { kind, meta, blobs })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransformerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TransformerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TransformerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_container(path: &Path, c: &Container) -> Result<(), TransformerError> {
    std::fs::write(path, c.to_bytes()).map_err(|e| TransformerError::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container, TransformerError> {
    let bytes = std::fs::read(path).map_err(|e| TransformerError::io(path, e))?;
    Container::from_bytes(&bytes)
}

impl<T: Scalar> TransformerModel<T> {
    /// Parameters as a model container; `extra` is stored under `meta.extra`.
    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        Container {
            kind: ContainerKind::Model,
            meta: json!({ "config": self.config(), "extra": extra }),
            blobs: self
                .named_params()
                .map(|(name, p)| Blob {
                    name: name.to_string(),
                    shape: p.shape().to_vec(),
                    data: p.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, TransformerError> {
        if c.kind != ContainerKind::Model {
            return Err(bad("not a model checkpoint"));
        }
        let config: ModelConfig =
            serde_json::from_value(c.meta["config"].clone()).map_err(|e| bad(format!("config: {e}")))?;
        let names = super::Layout::new(&config).names;
        if names.len() != c.blobs.len() || names.iter().zip(&c.blobs).any(|(n, b)| *n != b.name) {
            return Err(TransformerError::Incompatible("parameter names differ from the config layout".into()));
        }
        let params = c
            .blobs
            .iter()
            .map(|b| Tensor::new(b.shape.clone(), b.data.iter().map(|&v| T::from_f64(v as f64)).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_params(config, params)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), TransformerError> {
        write_container(path, &self.to_container(extra))
    }

    pub fn load(path: &Path) -> Result<Self, TransformerError> {
        Self::from_container(&read_container(path)?)
    }
}

/// Elementwise mean of models sharing one config, accumulated in `f64`.
pub fn average_models(models: &[TransformerModel<f32>]) -> Result<TransformerModel<f32>, TransformerError> {
    let first = models.first().ok_or_else(|| TransformerError::Incompatible("no checkpoints".into()))?;
    for m in &models[1..] {
        if m.config() != first.config() {
            return Err(TransformerError::Incompatible(format!(
                "config {:?} differs from {:?}",
                m.config(),
                first.config()
            )));
        }
    }
    let k = models.len() as f64;
    let params = (0..first.params().len())
        .map(|i| {
            let shape = first.params()[i].shape().to_vec();
            let n = first.params()[i].numel();
            let data = (0..n)
                .map(|e| {
                    let sum: f64 = models.iter().map(|m| m.params()[i].data()[e] as f64).sum();
                    (sum / k) as f32
                })
                .collect();
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    TransformerModel::from_params(first.config().clone(), params)
}

pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<TransformerModel<f32>, TransformerError> {
    let models = paths
        .iter()
        .map(|p| TransformerModel::load(p.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    average_models(&models)
}
