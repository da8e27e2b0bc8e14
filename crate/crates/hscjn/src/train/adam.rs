//! Adam with bias correction, one moment pair per parameter in
//! `ModelParams::named` order.

use crate::model::ModelParams;
use crate::tensor::{Array, Real};

#[derive(Clone, Debug)]
pub struct AdamState<R: Real> {
    pub m: Vec<Array<R>>,
    pub v: Vec<Array<R>>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ModelParams<R>) -> Self {
        let zeros: Vec<Array<R>> =
            params.named().iter().map(|(_, a)| Array::zeros(a.shape.clone())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One optimizer step over every parameter. `grads` must follow
/// `ModelParams::named` order; a missing gradient is treated as zero
/// (parameter and moments stay put).
pub fn adam_update<R: Real>(
    params: &mut ModelParams<R>,
    grads: &[Option<Array<R>>],
    state: &mut AdamState<R>,
    hyper: &AdamHyper,
) {
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let lr = R::of(hyper.lr);
    let b1 = R::of(hyper.beta1);
    let b2 = R::of(hyper.beta2);
    let one_m_b1 = R::of(1.0 - hyper.beta1);
    let one_m_b2 = R::of(1.0 - hyper.beta2);
    let eps = R::of(hyper.eps);
    let bc1 = R::of(bc1);
    let bc2 = R::of(bc2);

    let mut named = params.named_mut();
    assert_eq!(named.len(), grads.len(), "adam: gradient count mismatch");
    assert_eq!(named.len(), state.m.len(), "adam: moment count mismatch");
    for (i, (name, param)) in named.iter_mut().enumerate() {
        let Some(grad) = &grads[i] else { continue };
        assert_eq!(grad.shape, param.shape, "adam: {name} gradient shape mismatch");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..param.data.len() {
            let g = grad.data[k];
            m.data[k] = b1 * m.data[k] + one_m_b1 * g;
            v.data[k] = b2 * v.data[k] + one_m_b2 * g * g;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            param.data[k] = param.data[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients<R: Real>(grads: &mut [Option<Array<R>>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in &g.data {
            sq += v.as_f64() * v.as_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = R::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data.iter_mut() {
                *v = *v * scale;
            }
        }
    }
}
