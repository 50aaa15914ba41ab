use std::f64::consts::PI;

use super::{Encoder, Real};
use crate::error::{Error, Result};

/// First and second moment estimates, one buffer per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &Encoder<F>) -> Self {
        let zeros: Vec<Vec<F>> = params.trainable().iter().map(|p| vec![F::zero(); p.data.len()]).collect();
        Self { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step<F: Real>(params: &mut Encoder<F>, grads: &Encoder<F>, state: &mut AdamState<F>, lr: f64) -> Result<()> {
    let grads = grads.trainable();
    let mut params = params.trainable_mut();
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape("optimizer state does not match the parameters".into()));
    }
    for ((p, g), (m, v)) in params.iter().zip(&grads).zip(state.m.iter().zip(&state.v)) {
        if p.data.len() != g.data.len() || p.data.len() != m.len() || p.data.len() != v.len() {
            return Err(Error::Shape(format!("optimizer buffers for {} have the wrong size", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::c(state.beta1), F::c(state.beta2));
    let corr1 = F::c(1.0 - state.beta1.powi(t));
    let corr2 = F::c(1.0 - state.beta2.powi(t));
    let (lr, eps) = (F::c(lr), F::c(state.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &gv), mv), vv) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (F::one() - b1) * gv;
            *vv = b2 * *vv + (F::one() - b2) * gv * gv;
            let m_hat = *mv / corr1;
            let v_hat = *vv / corr2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_base` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_base: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_base;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_base - lr_min) * (1.0 + (PI * frac).cos())
}
