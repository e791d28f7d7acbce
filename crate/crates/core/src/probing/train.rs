use serde::{Deserialize, Serialize};

use super::{apply_head, mix_maps, HeadKind, OutputHead, ProbeDataset, ProbeError, ProbeExample, ProbeMode, ProbeParams, Result};
use crate::corpus::PAD;
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Reduction, Scalar, Tensor, Var};
use crate::transformer::train::Batcher;
use crate::transformer::{EncoderPoint, TransformerModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub steps: u64,
    /// Supervised tokens per optimizer step.
    pub batch_tokens: usize,
    pub lr: f64,
    /// Snapshot interval; the last snapshot is always taken.
    pub snapshot_every: u64,
    /// Number of trailing snapshots averaged into the final probe.
    pub average_last: usize,
    #[serde(default)]
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_tokens: 512,
            lr: 1e-3,
            snapshot_every: 100,
            average_last: 5,
            head: HeadKind::Shared,
            seed: 1,
        }
    }
}

impl ProbeTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.snapshot_every == 0 || self.average_last == 0 {
            return Err(ProbeError::Config("snapshot_every and average_last must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ProbeError::Config(format!("learning rate {} is not a finite non-negative number", self.lr)));
        }
        Ok(())
    }
}

/// Pre-head features of one example: `Â·h` or `h`, times `W`.
pub(crate) fn features<T: Scalar>(g: &mut Graph<T>, proj: Var, mix: Option<Var>, ex: &ProbeExample<T>) -> Result<Var> {
    let h = g.constant(ex.states.clone());
    let t = match (&ex.maps, mix) {
        (Some((stack, t, s)), Some(w)) => {
            let sv = g.constant(stack.clone());
            let a = mix_maps(g, w, sv, *t, *s)?;
            g.matmul(a, h)?
        }
        (None, _) => h,
        (Some(_), None) => return Err(ProbeError::Config("aligned example needs mixture weights".into())),
    };
    if g.shape(t)[0] != ex.rows() {
        return Err(ProbeError::Shape(format!("{} probe rows for {} targets", g.shape(t)[0], ex.rows())));
    }
    Ok(g.matmul(t, proj)?)
}

/// Mean token cross-entropy of the probe over `examples`.
///
/// `proj` and `mix` are graph handles so the loss can be differentiated
/// with respect to either; `mix` is ignored by examples without maps.
pub fn probe_loss<T: Scalar>(
    g: &mut Graph<T>,
    proj: Var,
    mix: Option<Var>,
    examples: &[&ProbeExample<T>],
    head: Option<&OutputHead<T>>,
) -> Result<Var> {
    if examples.is_empty() {
        return Err(ProbeError::NoExamples);
    }
    let mut rows = Vec::with_capacity(examples.len());
    let mut targets = Vec::new();
    for ex in examples {
        rows.push(features(g, proj, mix, ex)?);
        targets.extend_from_slice(&ex.targets);
    }
    let x = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let hv = head.map(|h| h.bind(g));
    let logits = apply_head(g, x, hv)?;
    Ok(g.cross_entropy(logits, &targets, PAD, Reduction::Mean, 0.0)?)
}

fn average<T: Scalar>(snaps: &[ProbeParams<T>]) -> ProbeParams<T> {
    let k = snaps.len() as f64;
    let avg = |get: fn(&ProbeParams<T>) -> &Tensor<T>| {
        let first = get(&snaps[0]);
        let data = (0..first.numel())
            .map(|i| T::from_f64(snaps.iter().map(|s| get(s).data()[i].as_f64()).sum::<f64>() / k))
            .collect();
        Tensor::new(first.shape().to_vec(), data).expect("snapshot shapes agree")
    };
    ProbeParams {
        head: snaps[0].head,
        mode: snaps[0].mode,
        proj: avg(|p| &p.proj),
        mix: avg(|p| &p.mix),
    }
}

/// Trains `init` on prepared examples with Adam and returns the average of
/// the trailing snapshots. Zero steps return `init` unchanged.
pub fn fit_probe<T: Scalar>(
    examples: &[ProbeExample<T>],
    init: ProbeParams<T>,
    head: Option<&OutputHead<T>>,
    cfg: &ProbeTrainConfig,
) -> Result<ProbeParams<T>> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(init);
    }
    let usable: Vec<&ProbeExample<T>> = examples.iter().filter(|e| e.supervised() > 0).collect();
    if usable.is_empty() {
        return Err(ProbeError::NoExamples);
    }
    let aligned = init.mode == ProbeMode::Aligned;
    let mut params = if aligned {
        vec![init.proj.clone(), init.mix.clone()]
    } else {
        vec![init.proj.clone()]
    };
    let hyper = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::for_params(&params);
    let mut order = Batcher::new(cfg.seed, "probe/order", usable.len());
    let mut snaps: Vec<ProbeParams<T>> = Vec::new();
    for step in 1..=cfg.steps {
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < cfg.batch_tokens.max(1) {
            let ex = usable[order.next()];
            tokens += ex.supervised();
            batch.push(ex);
        }
        let mut g = Graph::new();
        let proj = g.param(&params[0]);
        let mix = aligned.then(|| g.param(&params[1]));
        let loss = probe_loss(&mut g, proj, mix, &batch, head)?;
        g.backward(loss)?;
        let mut grads = vec![grad_of(&g, proj, &params[0])];
        if let Some(m) = mix {
            grads.push(grad_of(&g, m, &params[1]));
        }
        let l = g.value(loss).data()[0];
        if !l.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ProbeError::Diverged { step });
        }
        adam_step(&mut params, &grads, &mut state, &hyper)?;
        if step % cfg.snapshot_every == 0 || step == cfg.steps {
            snaps.push(ProbeParams {
                head: init.head,
                mode: init.mode,
                proj: params[0].clone(),
                mix: if aligned { params[1].clone() } else { init.mix.clone() },
            });
            if snaps.len() > cfg.average_last {
                snaps.remove(0);
            }
        }
    }
    Ok(average(&snaps))
}

fn grad_of<T: Scalar>(g: &Graph<T>, v: Var, like: &Tensor<T>) -> Vec<T> {
    g.grad(v).map_or_else(|| vec![T::zero(); like.numel()], <[T]>::to_vec)
}

/// Trains a probe on the states at `point` of a frozen model.
///
/// The model checksum is compared before and after training; any change is
/// an error.
pub fn train_probe<T: Scalar>(
    model: &TransformerModel<T>,
    data: &ProbeDataset<T>,
    point: EncoderPoint,
    mode: ProbeMode,
    cfg: &ProbeTrainConfig,
) -> Result<ProbeParams<T>> {
    if !model.is_frozen() {
        return Err(ProbeError::NotFrozen);
    }
    data.check_model(model)?;
    let before = model.checksum();
    let examples = data.examples(point, mode)?;
    let head = (cfg.head == HeadKind::Shared).then(|| OutputHead::from_model(model));
    let init = ProbeParams::for_model(model, cfg.head, mode);
    let probe = fit_probe(&examples, init, head.as_ref(), cfg)?;
    let after = model.checksum();
    if before != after {
        return Err(ProbeError::ChecksumChanged { before, after });
    }
    Ok(probe)
}
