use crate::tensor::Tensor;
use crate::train::GradStore;
use crate::weights::WeightStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: WeightStore,
    pub v: WeightStore,
}

impl AdamState {
    pub fn new(weights: &WeightStore) -> Self {
        let zeros = |w: &WeightStore| {
            let mut s = WeightStore::new();
            for (k, t) in w.iter() {
                s.insert(k, Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            step: 0,
            m: zeros(weights),
            v: zeros(weights),
        }
    }

    /// True when the moments cover exactly the weights, with equal shapes.
    pub fn matches(&self, weights: &WeightStore) -> bool {
        let same = |s: &WeightStore| {
            s.len() == weights.len()
                && weights
                    .iter()
                    .all(|(k, t)| s.get(k).is_some_and(|x| x.shape() == t.shape()))
        };
        same(&self.m) && same(&self.v)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    weights: &mut WeightStore,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f64,
    params: &AdamParams,
) -> Result<()> {
    for (name, w) in weights.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for `{name}`")))?;
        if g.shape() != w.shape() {
            return Err(Error::Invalid(format!(
                "gradient for `{name}` has shape {:?}, weight {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }
    if !state.matches(weights) {
        return Err(Error::Invalid("optimizer state does not match the weights".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (params.beta1 as f32, params.beta2 as f32);
    let c1 = (1.0 - params.beta1.powi(t)) as f32;
    let c2 = (1.0 - params.beta2.powi(t)) as f32;
    let (lr, eps) = (lr as f32, params.eps as f32);
    for (name, w) in weights.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let m = state.m.get(name).expect("checked above").data();
        let v = state.v.get(name).expect("checked above").data();
        for ((wi, &mi), &vi) in w.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mi / c1;
            let vhat = vi / c2;
            *wi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
