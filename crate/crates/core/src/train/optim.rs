use crate::autodiff::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamWState<F> {
    pub params: AdamWParams,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamWState<F> {
    pub fn new(store: &ParamStore<F>, params: AdamWParams) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| vec![F::zero(); p.value.numel()])
                .collect()
        };
        AdamWState {
            params,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update from the gradients held in `store`.
///
/// Decay is decoupled: `θ ← θ − lr·wd·θ` is applied before the adaptive
/// step. A non-finite gradient anywhere aborts the step before any value
/// changes.
pub fn adamw_step<F: Real>(
    store: &mut ParamStore<F>,
    state: &mut AdamWState<F>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!(
                "state tracks {} parameters, store has {}",
                state.m.len(),
                store.len()
            ),
        ));
    }
    if let Some(p) = store
        .iter()
        .find(|p| p.grad.data().iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFiniteGradient {
            param: p.name.clone(),
        });
    }

    state.step += 1;
    let AdamWParams { beta1, beta2, eps } = state.params;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (F::of(beta1), F::of(beta2));
    let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
    let step = F::of(lr / c1);
    let root_c2 = F::of(c2.sqrt());
    let eps = F::of(eps);
    let keep = F::of(1.0 - lr * weight_decay);

    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for k in 0..value.len() {
            let g = grad[k];
            m[k] = b1 * m[k] + one_b1 * g;
            v[k] = b2 * v[k] + one_b2 * g * g;
            let denom = v[k].sqrt() / root_c2 + eps;
            value[k] = value[k] * keep - step * m[k] / denom;
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = store.global_grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// `lr0 · (1 − step/total)`, floored at zero.
pub fn lr_schedule(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    (lr0 * (1.0 - step as f64 / total_steps as f64)).max(0.0)
}
