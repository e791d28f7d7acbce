use serde::{Deserialize, Serialize};

use super::{NumericsError, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then decay with `1/sqrt(step)`.
    InverseSqrt { warmup: u64 },
}

impl LrSchedule {
    /// Learning rate for 1-based `step`.
    pub fn rate(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::InverseSqrt { warmup } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                base * (s / w).min((w / s).sqrt())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            schedule: LrSchedule::Constant,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update of `params` from `grads`.
///
/// Moments are kept in `f64` arithmetic per element and written back in `T`.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    hyper: &AdamConfig,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::StateMismatch {
            params: params.len(),
            state: state.m.len().min(grads.len()),
        });
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.numel() != g.len() || p.numel() != m.len() || p.numel() != v.len() {
            return Err(NumericsError::DataLength {
                shape: p.shape().to_vec(),
                len: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = hyper.schedule.rate(hyper.lr, state.step);
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + hyper.eps);
            *x = T::from_f64(x.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::<f64>::vector(vec![1.0, -2.0, 3.0])];
        let before = params.clone();
        let mut state = AdamState::for_params(&params);
        adam_step(&mut params, &[vec![0.0; 3]], &mut state, &hyper(0.1)).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_against_sign() {
        let mut params = vec![Tensor::<f64>::vector(vec![0.0; 4])];
        let g = vec![0.5, -3.0, 1e-3, -1e3];
        let mut state = AdamState::for_params(&params);
        adam_step(&mut params, std::slice::from_ref(&g), &mut state, &hyper(0.01)).unwrap();
        for (p, gi) in params[0].data().iter().zip(&g) {
            // m̂ = g and v̂ = g² after bias correction
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
            assert_eq!(p.signum(), -gi.signum());
        }
    }

    /// Scalar Adam written out by hand, independent of the vectorized path.
    fn scripted_adam(x0: f64, grads: &[f64], h: &AdamConfig) -> Vec<f64> {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = h.beta1 * m + (1.0 - h.beta1) * g;
            v = h.beta2 * v + (1.0 - h.beta2) * g * g;
            let mh = m / (1.0 - h.beta1.powi(t));
            let vh = v / (1.0 - h.beta2.powi(t));
            x -= h.lr * mh / (vh.sqrt() + h.eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn two_steps_match_scripted_trace() {
        let h = hyper(0.05);
        let mut params = vec![Tensor::<f64>::vector(vec![1.5])];
        let mut state = AdamState::for_params(&params);
        let grads = [0.7, -0.2];
        let reference = scripted_adam(1.5, &grads, &h);
        for (g, r) in grads.iter().zip(&reference) {
            adam_step(&mut params, &[vec![*g]], &mut state, &h).unwrap();
            assert!((params[0].data()[0] - r).abs() < 1e-15);
        }
        assert_eq!(state.step, 2);
    }

    #[test]
    fn inverse_sqrt_peaks_at_warmup() {
        let s = LrSchedule::InverseSqrt { warmup: 100 };
        assert!((s.rate(1.0, 100) - 1.0).abs() < 1e-12);
        assert!((s.rate(1.0, 50) - 0.5).abs() < 1e-12);
        assert!((s.rate(1.0, 400) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut params = vec![Tensor::<f32>::vector(vec![0.0; 2])];
        let mut state = AdamState::for_params(&[]);
        assert!(adam_step(&mut params, &[vec![0.0; 2]], &mut state, &hyper(0.1)).is_err());
    }
}
