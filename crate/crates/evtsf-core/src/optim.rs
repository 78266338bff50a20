//! Adam optimizer and early stopping.

use crate::tensor::{GradSet, ParamSet, Tensor};
use crate::{Error, Result};
// Inherent f64 methods win under std; this import supplies exp/sqrt/etc.
// via libm when built without it.
#[allow(unused_imports)]
use num_traits::Float;

/// Adam hyper-parameters. Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus step counter for one parameter tensor.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl MomentState {
    pub fn zeros_like(t: &Tensor) -> Self {
        MomentState {
            m: Tensor::zeros(t.shape()),
            v: Tensor::zeros(t.shape()),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `value` in place.
///
/// Rejects non-finite gradients and shape mismatches before touching any
/// state, so a failed call leaves `value` and `state` unchanged.
pub fn adam_step(
    value: &mut Tensor,
    grad: &Tensor,
    state: &mut MomentState,
    hyper: &AdamHyper,
) -> Result<()> {
    if grad.shape() != value.shape() || state.m.shape() != value.shape() {
        return Err(Error::Shape(alloc::format!(
            "adam buffers disagree: value {:?}, grad {:?}, moments {:?}",
            value.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradient passed to adam_step".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hyper.beta1.powi(t);
    let bias2 = 1.0 - hyper.beta2.powi(t);
    let (vals, grads) = (value.data_mut(), grad.data());
    let (ms, vs) = (state.m.data_mut(), state.v.data_mut());
    for i in 0..vals.len() {
        let g = grads[i];
        ms[i] = hyper.beta1 * ms[i] + (1.0 - hyper.beta1) * g;
        vs[i] = hyper.beta2 * vs[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = ms[i] / bias1;
        let v_hat = vs[i] / bias2;
        vals[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamHyper,
    states: alloc::vec::Vec<MomentState>,
}

impl Adam {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        Adam {
            hyper,
            states: params
                .ids()
                .map(|id| MomentState::zeros_like(params.value(id)))
                .collect(),
        }
    }

    /// Applies one update to every parameter. A non-finite gradient aborts
    /// with an error naming the offending parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<()> {
        if let Some(name) = grads.find_non_finite(params) {
            return Err(Error::NonFinite(alloc::format!(
                "gradient for parameter {name:?}"
            )));
        }
        for id in params.ids() {
            adam_step(
                params.value_mut(id),
                grads.grad(id),
                &mut self.states[id.0],
                &self.hyper,
            )?;
        }
        Ok(())
    }
}

/// Tracks a validation metric and signals when to stop.
///
/// An epoch "improves" when its metric is strictly below the best seen so
/// far; `patience` consecutive non-improving epochs stop the run. The caller
/// snapshots parameters whenever [`EarlyStopper::observe`] reports an
/// improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch's metric; returns `(improved, stop)`.
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
