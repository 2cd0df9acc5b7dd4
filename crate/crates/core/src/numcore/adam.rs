use super::Real;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters. `weight_decay` is decoupled (AdamW) and
/// defaults to zero, which gives plain Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, lr: T) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay: T::zero(),
        }
    }

    pub fn with_eps(mut self, eps: T) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_weight_decay(mut self, wd: T) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Gradients are validated before anything is touched, so a rejected step
/// leaves both `params` and `state` unchanged.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::LengthMismatch {
            op: "adam_step",
            expected: params.len(),
            actual: if params.len() != grads.len() {
                grads.len()
            } else {
                state.m.len()
            },
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "adam_step gradient",
            index,
        });
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (one - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (one - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        if state.weight_decay > T::zero() {
            params[i] = params[i] - state.lr * state.weight_decay * params[i];
        }
        params[i] = params[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: T) -> T {
    let norm = grads.iter().fold(T::zero(), |a, &g| a + g * g).sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + T::of(1e-6));
        for g in grads.iter_mut() {
            *g = *g * s;
        }
    }
    norm
}
