//! Finite-difference verification of analytic gradients.
//!
//! Every backward pass in this crate is written by hand, so each one is held
//! against a central-difference probe of the actual loss. The check perturbs
//! individual parameter entries in place, re-evaluates the loss, and compares
//! the numeric slope against the recorded analytic gradient entry by entry.

use crate::rng::StreamRng;
use crate::tensor::{GradSet, ParamId, ParamSet};
use crate::{Error, Result};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Tolerances and sampling policy for a finite-difference run.
#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub abs_floor: f64,
    /// Entries probed per parameter (the whole tensor when it is smaller).
    pub max_entries_per_group: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            max_entries_per_group: 64,
        }
    }
}

/// Worst observed disagreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    /// Flat index, analytic value, and numeric value at the worst entry.
    pub worst: (usize, f64, f64),
    pub pass: bool,
}

/// Outcome of a full finite-difference sweep.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub groups: Vec<GroupReport>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| m.max(g.max_rel_err))
    }

    /// Names of failing groups, for error messages.
    pub fn failures(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.pass)
            .map(|g| g.name.as_str())
            .collect()
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `grads` against central differences of `loss` for the given
/// parameters.
///
/// Large tensors are subsampled without replacement using `rng`; pass a
/// `max_entries_per_group` of `usize::MAX` to probe everything. The loss
/// closure must be a pure function of the parameter values. Parameters are
/// restored bitwise after each probe, so the set is unchanged on return.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    grads: &GradSet,
    ids: &[ParamId],
    mut loss: F,
    cfg: &CheckConfig,
    rng: &mut StreamRng,
) -> Result<CheckReport>
where
    F: FnMut(&ParamSet) -> f64,
{
    if cfg.eps <= 0.0 || cfg.rel_tol <= 0.0 {
        return Err(Error::Config(
            "finite-difference eps and rel_tol must be positive".into(),
        ));
    }
    let mut groups = Vec::with_capacity(ids.len());
    for &id in ids {
        let len = params.value(id).numel();
        if len == 0 {
            continue;
        }
        let picks = sample_indices(len, cfg.max_entries_per_group, rng);
        let mut worst = (0usize, 0.0f64, 0.0f64);
        let mut max_rel = 0.0f64;
        for &i in &picks {
            let original = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = original + cfg.eps;
            let up = loss(params);
            params.value_mut(id).data_mut()[i] = original - cfg.eps;
            let down = loss(params);
            params.value_mut(id).data_mut()[i] = original;

            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(alloc::format!(
                    "loss while probing parameter {:?} entry {i}",
                    params.name(id)
                )));
            }
            let numeric = (up - down) / (2.0 * cfg.eps);
            let analytic = grads.grad(id).data()[i];
            let rel = relative_error(analytic, numeric, cfg.abs_floor);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, analytic, numeric);
            }
        }
        groups.push(GroupReport {
            name: params.name(id).to_string(),
            entries_checked: picks.len(),
            max_rel_err: max_rel,
            worst,
            pass: max_rel < cfg.rel_tol,
        });
    }
    Ok(CheckReport { groups })
}

/// Up to `max` distinct indices in `0..len` (all of them when `len <= max`).
fn sample_indices(len: usize, max: usize, rng: &mut StreamRng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    // Partial Fisher-Yates over the index vector: first `max` slots are an
    // unbiased sample without replacement.
    let mut all: Vec<usize> = (0..len).collect();
    for i in 0..max {
        let j = i + rng.index(len - i);
        all.swap(i, j);
    }
    all.truncate(max);
    all.sort_unstable();
    all
}
