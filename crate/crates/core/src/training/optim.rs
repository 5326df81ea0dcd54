use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bias-corrected Adam moments, one pair per stored parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, base_lr: 1e-3 }
    }
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, hyper: AdamHyper) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0, hyper }
    }
}

/// One Adam update. `grads[i]` is the gradient of parameter `i`; `None`
/// leaves that parameter and its moments untouched (frozen or unused).
/// Every gradient is checked before anything is modified.
pub fn adam_step<S: Scalar>(
    state: &mut AdamState<S>,
    store: &mut ParamStore<S>,
    grads: &[Option<Tensor<S>>],
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::LengthMismatch { expected: store.len(), found: grads.len() });
    }
    for (p, g) in store.params().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch { op: "adam_step", lhs: g.shape().to_vec(), rhs: p.value.shape().to_vec() });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let (b1, b2) = (S::of(h.beta1), S::of(h.beta2));
    let (one, eps) = (S::one(), S::of(h.eps));
    let step = S::of(lr / c1);
    let c2 = S::of(c2);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let value = p.value.data_mut();
        for k in 0..value.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            value[k] -= step * m[k] / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales each row of a rank-2 tensor whose L2 norm exceeds `threshold`.
pub fn clip_rows<S: Scalar>(t: &mut Tensor<S>, threshold: f64) {
    let cols = *t.shape().last().unwrap_or(&1);
    if cols == 0 {
        return;
    }
    let th = S::of(threshold);
    for row in t.data_mut().chunks_mut(cols) {
        let norm = row.iter().fold(S::zero(), |a, &v| a + v * v).sqrt();
        if norm > th {
            let s = th / norm;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Max-norm constraint on the rows of every weight matrix and node map.
/// `only` restricts it to the listed parameter indices.
pub fn max_norm_clip<S: Scalar>(store: &mut ParamStore<S>, threshold: f64, only: Option<&[bool]>) -> Result<()> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("max-norm threshold must be positive, got {threshold}")));
    }
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        if p.role.is_matrix_weight() && only.is_none_or(|o| o[i]) {
            clip_rows(&mut p.value, threshold);
        }
    }
    Ok(())
}
