use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::numerics::{Real, Tensor};

/// One decoupled-weight-decay Adam update of a single tensor. `step` counts
/// from 1 and drives the bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    wd: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - libm::pow(b1, step as f64);
    let c2 = 1.0 - libm::pow(b2, step as f64);
    let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let decay = T::from_f64(1.0 - lr * wd);
    let (lr_t, c1, c2, eps) = (T::from_f64(lr), T::from_f64(c1), T::from_f64(c2), T::from_f64(eps));
    for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = tb1 * *mi + one_b1 * g;
        *vi = tb2 * *vi + one_b2 * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW state for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Per-tensor switch for weight decay.
    pub decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    /// Fresh moments; weight decay applies to matrices and kernels, not to
    /// vectors (norm scales, biases, aggregation weights).
    pub fn new(params: &[Tensor<T>], weight_decay: f64) -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: params.iter().map(|p| p.rank() >= 2).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<&[T]>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err("adamw", &[params.len()], &[self.m.len(), grads.len()]));
        }
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let zeros;
            let g = match grads[i] {
                Some(g) => g,
                None => {
                    zeros = alloc::vec![T::ZERO; p.len()];
                    &zeros
                }
            };
            if g.len() != p.len() {
                return Err(shape_err("adamw", p.shape(), &[g.len()]));
            }
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            adamw_step(
                p.data_mut(),
                g,
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                lr,
                self.betas,
                self.eps,
                wd,
            );
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `peak` over `warmup` steps, then half-cosine
/// decay that reaches 0 at `total - 1`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return peak;
    }
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}
