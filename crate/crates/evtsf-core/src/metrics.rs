//! Forecast error metrics, reported per variable cohort.
//!
//! Evaluation runs the model over every fully observed window of a range,
//! maps forecasts back to physical units, and accumulates errors into three
//! buckets: variables observed from the start, late arrivals, and their
//! union. Two scalar comparisons build on these: [`delta_gap`] relates a
//! model to an oracle trained on the same panel without missingness, and
//! [`afmae`] compares two models on the continual cohort to measure how
//! much training through the expansion cost the original variables.

use crate::data::{make_windows, EvtsDataset, Normalizer, SlotRange};
use crate::flat::flatten;
use crate::model::Model;
use crate::{Error, Result};
use alloc::format;
use serde::{Deserialize, Serialize};

// Inherent f64 methods win under std; this import supplies exp/sqrt/etc.
// via libm when built without it.
#[allow(unused_imports)]
use num_traits::Float;

/// Relative error gap to an oracle: `(e_model - e_oracle) / e_oracle`.
///
/// Returned as a plain ratio; multiply by 100 to quote a percentage. The
/// oracle error anchors the denominator and must be positive.
pub fn delta_gap(e_model: f64, e_oracle: f64) -> Result<f64> {
    if !e_model.is_finite() || !e_oracle.is_finite() {
        return Err(Error::NonFinite("errors passed to delta_gap".into()));
    }
    if e_oracle <= 0.0 {
        return Err(Error::Config(format!(
            "oracle error must be positive, got {e_oracle}"
        )));
    }
    Ok((e_model - e_oracle) / e_oracle)
}

/// Forgetting gap: the continual cohort's MAE under a model trained through
/// the expansion (`mae_new`) minus the same cohort's MAE under a reference
/// model trained before it (`mae_old`). Positive means the expanded
/// training degraded the original variables.
pub fn afmae(mae_new: f64, mae_old: f64) -> f64 {
    mae_new - mae_old
}

/// Error summary for one cohort of forecast cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub mae: f64,
    pub rmse: f64,
    /// Number of forecast cells behind the means.
    pub cells: usize,
}

/// Sum-accumulator that finishes into a [`GroupScores`].
#[derive(Debug, Clone, Copy, Default)]
struct ErrorAccum {
    abs: f64,
    sq: f64,
    cells: usize,
}

impl ErrorAccum {
    fn push(&mut self, err: f64) {
        self.abs += err.abs();
        self.sq += err * err;
        self.cells += 1;
    }

    fn finish(self) -> Option<GroupScores> {
        if self.cells == 0 {
            return None;
        }
        let n = self.cells as f64;
        Some(GroupScores {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            cells: self.cells,
        })
    }
}

/// Cohort-grouped errors over one evaluation range. A bucket is absent —
/// not zero — when the range produced no cells for it (a pre-expansion
/// range has no late arrivals; a too-short range has no windows at all).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Variables observed from slot 0.
    pub continual: Option<GroupScores>,
    /// Late-arriving variables.
    pub expanding: Option<GroupScores>,
    /// Every forecast cell of the range.
    pub overall: Option<GroupScores>,
}

impl SplitMetrics {
    /// Internal consistency: each bucket's RMSE dominates its MAE, the
    /// overall cell count is the cohort total, and the overall MAE lies
    /// between the cohort MAEs.
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("continual", self.continual),
            ("expanding", self.expanding),
            ("overall", self.overall),
        ] {
            if let Some(g) = g {
                if !(g.mae.is_finite() && g.rmse.is_finite()) || g.mae < 0.0 {
                    return Err(Error::NonFinite(format!("{name} scores")));
                }
                if g.rmse < g.mae - 1e-12 {
                    return Err(Error::Config(format!(
                        "{name} rmse {} below its mae {}",
                        g.rmse, g.mae
                    )));
                }
            }
        }
        let cohort_cells =
            self.continual.map_or(0, |g| g.cells) + self.expanding.map_or(0, |g| g.cells);
        if self.overall.map_or(0, |g| g.cells) != cohort_cells {
            return Err(Error::Config("cohort cells do not add up".into()));
        }
        if let (Some(i), Some(e), Some(o)) = (self.continual, self.expanding, self.overall) {
            let lo = i.mae.min(e.mae) - 1e-12;
            let hi = i.mae.max(e.mae) + 1e-12;
            if o.mae < lo || o.mae > hi {
                return Err(Error::Config(format!(
                    "overall mae {} outside its cohort envelope [{lo}, {hi}]",
                    o.mae
                )));
            }
        }
        Ok(())
    }
}

/// Forecast errors of `model` over every window of `range`, in physical
/// units.
///
/// The panel is normalized with `norm` for the model and forecasts are
/// mapped back per variable before scoring, so the reported numbers carry
/// the data's own units. Windows are processed `batch_size` at a time;
/// inference is row-independent, so the grouping cannot affect the result.
pub fn evaluate(
    model: &Model,
    ds: &EvtsDataset,
    norm: &Normalizer,
    range: SlotRange,
    batch_size: usize,
) -> Result<SplitMetrics> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let history = model.cfg.stfe.history;
    let horizon = model.cfg.stfe.horizon;
    let normalized = norm.normalize_dataset(ds);
    let windows = make_windows(&normalized, range, history, horizon)?;

    let mut continual = ErrorAccum::default();
    let mut expanding = ErrorAccum::default();
    let mut overall = ErrorAccum::default();
    for chunk in windows.chunks(batch_size) {
        let batch = flatten(chunk)?;
        let pred = model.predict(&batch)?;
        for r in 0..batch.n_rows() {
            let var = batch.variable_id[r];
            let bucket: &mut ErrorAccum = if batch.expanding[r] {
                &mut expanding
            } else {
                &mut continual
            };
            for q in 0..horizon {
                let p = norm.denormalize_value(var, pred.at2(r, q));
                let y = norm.denormalize_value(var, batch.targets.at2(r, q));
                bucket.push(p - y);
                overall.push(p - y);
            }
        }
    }
    Ok(SplitMetrics {
        continual: continual.finish(),
        expanding: expanding.finish(),
        overall: overall.finish(),
    })
}
