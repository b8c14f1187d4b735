//! Learning-rate schedule and Adam.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// `base_lr` for the first `warm` epochs, then `base_lr * (epochs - epoch) /
/// decay`, which reaches `base_lr / decay` at the last epoch.
pub fn lr_at_epoch(epoch: usize, base_lr: f64, warm: usize, decay: usize) -> Result<f64> {
    let epochs = warm + decay;
    if epoch >= epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside 0..{epochs}")));
    }
    if epoch < warm {
        Ok(base_lr)
    } else {
        Ok(base_lr * (epochs - epoch) as f64 / decay as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter (aligned with the store's
/// registration order, allocated on a parameter's first update) and the
/// shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(n_params: usize) -> Self {
        OptimState {
            moments: vec![None; n_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter that holds a gradient.
/// Parameters without a gradient (frozen, or not reached by the loss) are
/// left untouched, moments included.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimState<T>, lr: f64, hp: &AdamParams) {
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2, eps) = (T::of(hp.beta1), T::of(hp.beta2), T::of(hp.eps));
    let (ib1, ib2) = (T::one() - b1, T::one() - b2);
    let (lr, c1, c2) = (T::of(lr), T::of(c1), T::of(c2));
    for (p, slot) in store.params_mut().zip(state.moments.iter_mut()) {
        let (true, Some(g)) = (p.requires_grad, p.grad.as_ref()) else {
            continue;
        };
        let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(p.value.shape().to_vec()), Tensor::zeros(p.value.shape().to_vec())));
        let iter = p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &g), (m, v)) in iter {
            *m = b1 * *m + ib1 * g;
            *v = b2 * *v + ib2 * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
