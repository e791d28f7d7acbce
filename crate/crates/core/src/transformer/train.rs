use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::forward::{teacher_prefix, Runner};
use super::{TransformerError, TransformerModel};
use crate::corpus::{CorpusSplit, PAD};
use crate::numerics::{adam_step, rng, AdamConfig, AdamState, LrSchedule, Reduction, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Target tokens per optimizer step; whole sentences are added until
    /// the budget is reached.
    pub batch_tokens: usize,
    pub lr: f64,
    /// Linear warmup length of the inverse square-root schedule; 0 keeps
    /// the rate constant.
    #[serde(default)]
    pub warmup: u64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Save a checkpoint every this many steps and after the last one.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_tokens: 256,
            lr: 2e-3,
            warmup: 100,
            label_smoothing: 0.1,
            checkpoint_every: 100,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            schedule: if self.warmup == 0 {
                LrSchedule::Constant
            } else {
                LrSchedule::InverseSqrt { warmup: self.warmup }
            },
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean token cross-entropy of every step's batch.
    pub losses: Vec<f64>,
    /// Checkpoint files in the order they were written.
    pub checkpoints: Vec<PathBuf>,
}

/// Cycles through `0..n` in a fresh seeded order every epoch.
pub(crate) struct Batcher {
    seed: u64,
    purpose: &'static str,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(seed: u64, purpose: &'static str, n: usize) -> Self {
        let mut b = Self {
            seed,
            purpose,
            epoch: 0,
            order: (0..n).collect(),
            pos: 0,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut rng::stream(self.seed, &format!("{}/{}", self.purpose, self.epoch)));
    }

    pub fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Minimizes token cross-entropy with Adam.
///
/// Gradients are accumulated sentence by sentence in a fixed order, so the
/// run is bit-reproducible for a given seed. With `out_dir`, checkpoints
/// are written as `ckpt_<step>.bin`. A non-finite loss or gradient aborts
/// before the update, leaving earlier checkpoints in place.
pub fn train<T: Scalar>(
    model: &mut TransformerModel<T>,
    corpus: &CorpusSplit,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TransformerError> {
    if model.is_frozen() {
        return Err(TransformerError::Frozen);
    }
    if corpus.is_empty() {
        return Err(TransformerError::Empty);
    }
    if cfg.checkpoint_every == 0 {
        return Err(TransformerError::Config("checkpoint_every must be positive".into()));
    }
    let hyper = cfg.adam();
    let mut state = AdamState::for_params(model.params());
    let mut batcher = Batcher::new(cfg.seed, "train/order", corpus.len());
    let mut drop_rng = rng::stream(cfg.seed, "train/dropout");
    let dropout = model.config().dropout;
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps as usize),
        checkpoints: Vec::new(),
    };
    for step in 1..=cfg.steps {
        let mut grads: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let mut tokens = 0usize;
        let mut loss_sum = 0.0;
        while tokens < cfg.batch_tokens.max(1) {
            let pair = &corpus.pairs()[batcher.next()];
            model.check_ids(&pair.source)?;
            model.check_ids(&pair.target)?;
            let mut r = Runner::new(model, true).with_dropout(dropout, &mut drop_rng);
            let mem = r.encode(&pair.source, None)?;
            let logits = r.decode(&teacher_prefix(&pair.target), mem, None)?;
            let loss = r.g.cross_entropy(logits, &pair.target, PAD, Reduction::Sum, cfg.label_smoothing)?;
            r.g.backward(loss)?;
            loss_sum += r.g.value(loss).data()[0].as_f64();
            for (acc, &v) in grads.iter_mut().zip(&r.p) {
                if let Some(g) = r.g.grad(v) {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            tokens += pair.target.len();
        }
        let inv = T::from_f64(1.0 / tokens as f64);
        let mut finite = true;
        for g in grads.iter_mut().flatten() {
            *g *= inv;
            finite &= g.is_finite();
        }
        let loss = loss_sum / tokens as f64;
        if !loss.is_finite() || !finite {
            log::warn!("non-finite loss or gradient at step {step}; aborting");
            return Err(TransformerError::Diverged {
                step,
                last_good: report.checkpoints.last().cloned(),
            });
        }
        report.losses.push(loss);
        adam_step(model.params_mut()?, &grads, &mut state, &hyper)?;
        if step % 50 == 0 {
            log::info!("step {step} loss {loss:.4}");
        }
        if let Some(dir) = out_dir {
            if step % cfg.checkpoint_every == 0 || step == cfg.steps {
                let path = dir.join(format!("ckpt_{step:06}.bin"));
                model.save(&path, json!({ "step": step, "loss": loss }))?;
                report.checkpoints.push(path);
            }
        }
    }
    Ok(report)
}
