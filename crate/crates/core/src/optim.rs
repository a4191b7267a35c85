//! SGD and AdamW over named parameter sets.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamSet};
use crate::tensor::{with_dtype, Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    /// Zeroed moments for every trainable tensor of `params`.
    pub fn for_params(params: &ParamSet) -> Self {
        let mut s = Self::default();
        for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
            s.m.insert(name.to_string(), Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
            s.v.insert(name.to_string(), Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
        }
        s
    }
}

fn grad_for<'a>(grads: &'a Gradients, name: &str, w: &Tensor) -> Result<&'a Tensor> {
    let g = grads
        .get(name)
        .ok_or_else(|| Error::invalid(format!("no gradient for trainable tensor {name}")))?;
    w.same_layout(g, "optimizer step")?;
    Ok(g)
}

/// `w ← w − lr·g` for every trainable tensor.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
    for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
        let g = grad_for(grads, name, &p.tensor)?.clone();
        with_dtype!(p.tensor.dtype(), T => {
            let lr = T::of(lr);
            let gs = g.as_slice::<T>()?;
            for (w, &g) in p.tensor.make_mut::<T>()?.iter_mut().zip(gs) {
                *w = *w - lr * g;
            }
        });
    }
    Ok(())
}

/// AdamW with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
        let g = grad_for(grads, name, &p.tensor)?.clone();
        let missing = || Error::invalid(format!("missing optimizer state for {name}"));
        let m = state.m.get_mut(name).ok_or_else(missing)?;
        let v = state.v.get_mut(name).ok_or_else(missing)?;
        p.tensor.same_layout(m, "adamw state")?;
        p.tensor.same_layout(v, "adamw state")?;
        with_dtype!(p.tensor.dtype(), T => {
            let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
            let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
            let decay = T::of(1.0 - lr * cfg.weight_decay);
            let (lr_t, bc1, bc2, eps) = (T::of(lr), T::of(bc1), T::of(bc2), T::of(cfg.eps));
            let gs = g.as_slice::<T>()?;
            let ms = m.make_mut::<T>()?;
            let vs = v.make_mut::<T>()?;
            let ws = p.tensor.make_mut::<T>()?;
            for i in 0..ws.len() {
                ms[i] = b1 * ms[i] + one_b1 * gs[i];
                vs[i] = b2 * vs[i] + one_b2 * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ws[i] = ws[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

/// Optimizer with its per-tensor state, created fresh for each round of local training.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    AdamW { cfg: AdamWConfig, state: AdamState },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adamw => Optimizer::AdamW {
                cfg: AdamWConfig::default(),
                state: AdamState::for_params(params),
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::AdamW { cfg, state } => adamw_step(params, grads, state, lr, cfg),
        }
    }
}
