use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            let mut s = ParamStore::new(0);
            for (k, v) in params.iter() {
                s.insert(k, DenseArray::zeros(v.shape())).expect("names unique");
            }
            s
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// Norms seen by one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepNorms {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Rescales `grads` in place so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW: global-norm clipping, decoupled decay `θ ← θ(1 − lr·wd)`, then the
/// bias-corrected Adam step. Non-finite gradients leave everything untouched
/// and return an error.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &mut Gradients,
    state: &mut AdamState,
    hyper: AdamHyper,
    lr: f64,
    weight_decay: f64,
    clip_norm: f64,
) -> Result<StepNorms> {
    if !grads.is_finite() {
        return Err(Error::NonFinite { op: "optimizer_step" });
    }
    let grad_norm = clip_global_norm(grads, clip_norm);
    let clipped_norm = grads.global_norm();
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powf(state.t as f64);
    let bc2 = 1.0 - hyper.beta2.powf(state.t as f64);
    let decay = 1.0 - lr * weight_decay;
    for (name, theta) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if m.shape() != theta.shape() || g.shape() != theta.shape() {
            return Err(Error::shape("optimizer_step", name.to_string()));
        }
        let m = m.data_mut();
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .data_mut();
        for (i, (th, &gi)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *th *= decay;
            *th -= lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(StepNorms {
        grad_norm,
        clipped_norm,
    })
}
