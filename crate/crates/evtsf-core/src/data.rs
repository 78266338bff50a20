//! Synthetic expanding-variate datasets: generation, partitioning into
//! initial and late-arriving sensors, windowing, and normalization.
//!
//! A dataset is a `time x variable` matrix in physical units plus an
//! observation mask. Variables in the initial set stream from slot 0;
//! expanding variables come online at scheduled boundaries and are unobserved
//! before their boundary. The split layout is fixed: an initial training
//! period, a short post-expansion training period, then validation and test.
//!
//! The generator simulates sensors scattered in a 100 km x 100 km area. A
//! latent state diffuses each tick across a distance-decayed affinity, so
//! nearby sensors correlate; each series adds its own daily sinusoid and
//! measurement noise on top.

use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
// Inherent f64 methods win under std; this import supplies exp/sqrt/etc.
// via libm when built without it.
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Half-open slot range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRange {
    pub start: usize,
    pub end: usize,
}

impl SlotRange {
    pub fn new(start: usize, end: usize) -> Self {
        SlotRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t < self.end
    }
}

/// Train/validation/test boundaries over the time axis.
///
/// `train1` is the pre-expansion period, `train2` the post-expansion training
/// period; they are adjacent, and `valid` and `test` follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train1: SlotRange,
    pub train2: SlotRange,
    pub valid: SlotRange,
    pub test: SlotRange,
}

/// How the initial variable set is selected from the sensor layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Initial set = sensors with the smallest x coordinate (a half-plane).
    Area,
    /// Initial set = sensors nearest the most central sensor.
    Spatial,
    /// Initial set = a uniform random subset.
    Internal,
}

/// A time x variable panel with an expansion schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct EvtsDataset {
    /// Values in physical units, shape `(t_total, n_vars)`. Entries outside
    /// the observation mask hold the simulated ground truth in freshly
    /// generated datasets and zero in datasets loaded from disk; no consumer
    /// may read them either way.
    pub values: Tensor,
    /// Row-major observation mask, shape `(t_total, n_vars)`.
    pub observed: Vec<bool>,
    /// Slots per day (daily period of the seasonal component).
    pub steps_per_day: usize,
    /// Sensor coordinates in km, one per variable.
    pub coords: Vec<(f64, f64)>,
    /// Variable ids observed from slot 0, ascending.
    pub v1_ids: Vec<usize>,
    /// All variable ids, ascending (columns of `values`).
    pub v2_ids: Vec<usize>,
    /// Slots at which expansion stages come online, ascending.
    pub expansion_steps: Vec<usize>,
    /// Per variable: first slot at which it is observed (0 for initial
    /// variables, one of `expansion_steps` otherwise).
    pub activation_step: Vec<usize>,
    pub splits: SplitSpec,
}

impl EvtsDataset {
    pub fn n_vars(&self) -> usize {
        self.values.dim(1)
    }

    pub fn t_total(&self) -> usize {
        self.values.dim(0)
    }

    /// Slot indices covered by the panel.
    pub fn timestamps(&self) -> core::ops::Range<usize> {
        0..self.t_total()
    }

    /// First expansion boundary.
    pub fn expansion_step(&self) -> usize {
        self.expansion_steps[0]
    }

    /// True when `var` is not part of the initial set.
    pub fn is_expanding(&self, var: usize) -> bool {
        self.activation_step[var] > 0
    }

    #[inline]
    pub fn is_observed(&self, t: usize, var: usize) -> bool {
        self.observed[t * self.n_vars() + var]
    }

    /// Variables active (observed) from slot `t` onward, ascending.
    pub fn active_at(&self, t: usize) -> Vec<usize> {
        (0..self.n_vars())
            .filter(|&v| self.activation_step[v] <= t)
            .collect()
    }

    /// Counterfactual twin where every variable is observed from slot 0.
    /// Splits, coordinates, and group identities are untouched, so reports
    /// on the twin are comparable group-by-group with the original.
    pub fn to_oracle(&self) -> EvtsDataset {
        let mut oracle = self.clone();
        oracle.observed = vec![true; self.t_total() * self.n_vars()];
        oracle.activation_step = vec![0; self.n_vars()];
        oracle
    }

    /// Checks structural invariants: mask matches the activation schedule,
    /// splits tile the time axis, observed values are finite.
    pub fn validate(&self) -> Result<()> {
        let (t_total, n) = (self.t_total(), self.n_vars());
        if self.observed.len() != t_total * n {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {t_total} x {n} panel",
                self.observed.len()
            )));
        }
        if self.coords.len() != n || self.activation_step.len() != n {
            return Err(Error::Shape(
                "coords/activation lists disagree with the variable count".into(),
            ));
        }
        let s = &self.splits;
        let contiguous = s.train1.start == 0
            && s.train1.end == s.train2.start
            && s.train2.end == s.valid.start
            && s.valid.end == s.test.start
            && s.test.end == t_total;
        if !contiguous {
            return Err(Error::Config("splits must tile the time axis".into()));
        }
        for (v, &act) in self.activation_step.iter().enumerate() {
            if act != 0 && !self.expansion_steps.contains(&act) {
                return Err(Error::Config(format!(
                    "variable {v} activates at {act}, which is not an expansion boundary"
                )));
            }
            for t in 0..t_total {
                let expected = t >= act;
                if self.is_observed(t, v) != expected {
                    return Err(Error::Config(format!(
                        "mask for variable {v} at slot {t} contradicts its activation step {act}"
                    )));
                }
                if expected && !self.values.at2(t, v).is_finite() {
                    return Err(Error::NonFinite(format!(
                        "observed value at slot {t}, variable {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generator configuration. Defaults give 8 initial + 4 expanding sensors
/// over 42 days of 24 slots: 30 days before expansion, 3 after, 2 validation,
/// 7 test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_continual: usize,
    /// Sensors added per expansion stage (one entry per stage).
    pub n_expanding: Vec<usize>,
    pub steps_per_day: usize,
    pub days_p1: usize,
    /// Post-expansion training days per stage (parallel to `n_expanding`).
    pub days_p2: Vec<usize>,
    pub days_valid: usize,
    pub days_test: usize,
    pub partition: PartitionMode,
    /// Length scale (km) of the distance-decayed affinity.
    pub sigma_km: f64,
    /// Fraction of each tick's latent state replaced by neighbor diffusion.
    pub coupling: f64,
    /// Per-tick retention of the latent state (slightly below 1).
    pub latent_decay: f64,
    /// Std of the per-tick latent innovation.
    pub latent_noise: f64,
    /// Std of i.i.d. measurement noise added to each reading.
    pub obs_noise: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    pub base_min: f64,
    pub base_max: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_continual: 8,
            n_expanding: vec![4],
            steps_per_day: 24,
            days_p1: 30,
            days_p2: vec![3],
            days_valid: 2,
            days_test: 7,
            partition: PartitionMode::Area,
            sigma_km: 30.0,
            coupling: 0.35,
            latent_decay: 0.9,
            latent_noise: 1.0,
            obs_noise: 0.3,
            amp_min: 3.0,
            amp_max: 8.0,
            base_min: 20.0,
            base_max: 40.0,
        }
    }
}

impl GenConfig {
    pub fn n_vars(&self) -> usize {
        self.n_continual + self.n_expanding.iter().sum::<usize>()
    }

    pub fn t_total(&self) -> usize {
        let days =
            self.days_p1 + self.days_p2.iter().sum::<usize>() + self.days_valid + self.days_test;
        days * self.steps_per_day
    }

    pub fn validate(&self) -> Result<()> {
        let positive_counts = self.n_continual >= 1
            && !self.n_expanding.is_empty()
            && self.n_expanding.iter().all(|&k| k >= 1)
            && self.steps_per_day >= 1
            && self.days_p1 >= 1
            && self.days_p2.iter().all(|&d| d >= 1)
            && self.days_valid >= 1
            && self.days_test >= 1;
        if !positive_counts {
            return Err(Error::Config(
                "all generator counts must be at least 1".into(),
            ));
        }
        if self.n_expanding.len() != self.days_p2.len() {
            return Err(Error::Config(format!(
                "{} expansion stages but {} post-expansion day counts",
                self.n_expanding.len(),
                self.days_p2.len()
            )));
        }
        let p2_days: usize = self.days_p2.iter().sum();
        if 5 * p2_days > self.days_p1 {
            return Err(Error::Config(format!(
                "post-expansion training ({p2_days} days) may not exceed 20% of the \
                 pre-expansion period ({} days)",
                self.days_p1
            )));
        }
        let continuous = self.sigma_km > 0.0
            && (0.0..1.0).contains(&self.coupling)
            && (0.0..=1.0).contains(&self.latent_decay)
            && self.latent_noise >= 0.0
            && self.obs_noise >= 0.0
            && self.amp_min <= self.amp_max
            && self.base_min <= self.base_max
            && self.amp_min >= 0.0;
        if !continuous {
            return Err(Error::Config(
                "generator noise/scale parameters out of range".into(),
            ));
        }
        Ok(())
    }

    /// Expansion boundaries implied by the day layout, ascending.
    pub fn expansion_boundaries(&self) -> Vec<usize> {
        let mut bounds = Vec::with_capacity(self.days_p2.len());
        let mut day = self.days_p1;
        for &d in &self.days_p2 {
            bounds.push(day * self.steps_per_day);
            day += d;
        }
        bounds
    }

    fn splits(&self) -> SplitSpec {
        let spd = self.steps_per_day;
        let b1 = self.days_p1 * spd;
        let train_end = b1 + self.days_p2.iter().sum::<usize>() * spd;
        let valid_end = train_end + self.days_valid * spd;
        SplitSpec {
            train1: SlotRange::new(0, b1),
            train2: SlotRange::new(b1, train_end),
            valid: SlotRange::new(train_end, valid_end),
            test: SlotRange::new(valid_end, self.t_total()),
        }
    }
}

/// Splits sensor ids into (initial, expanding) by the given mode.
///
/// Both returned lists are ascending; together they cover `0..coords.len()`
/// exactly once. `rng` is only consulted for [`PartitionMode::Internal`].
pub fn partition_variables(
    coords: &[(f64, f64)],
    n_continual: usize,
    mode: PartitionMode,
    rng: &mut StreamRng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = coords.len();
    if n_continual == 0 || n_continual >= n {
        return Err(Error::Config(format!(
            "initial set must be a strict nonempty subset: {n_continual} of {n}"
        )));
    }
    let chosen: Vec<usize> = match mode {
        PartitionMode::Area => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                coords[a]
                    .0
                    .partial_cmp(&coords[b].0)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order.truncate(n_continual);
            order
        }
        PartitionMode::Spatial => {
            let cx = coords.iter().map(|c| c.0).sum::<f64>() / n as f64;
            let cy = coords.iter().map(|c| c.1).sum::<f64>() / n as f64;
            let dist2 = |i: usize, x: f64, y: f64| {
                let (xi, yi) = coords[i];
                (xi - x) * (xi - x) + (yi - y) * (yi - y)
            };
            let anchor = (0..n)
                .min_by(|&a, &b| {
                    dist2(a, cx, cy)
                        .partial_cmp(&dist2(b, cx, cy))
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .unwrap();
            let (ax, ay) = coords[anchor];
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                dist2(a, ax, ay)
                    .partial_cmp(&dist2(b, ax, ay))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order.truncate(n_continual);
            order
        }
        PartitionMode::Internal => {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            order.truncate(n_continual);
            order
        }
    };
    let mut v1 = chosen;
    v1.sort_unstable();
    let expanding: Vec<usize> = (0..n).filter(|v| !v1.contains(v)).collect();
    Ok((v1, expanding))
}

/// Simulates a dataset from `cfg`, deterministically in `rng`'s seed.
pub fn generate_synthetic(cfg: &GenConfig, rng: &StreamRng) -> Result<EvtsDataset> {
    cfg.validate()?;
    let n = cfg.n_vars();
    let t_total = cfg.t_total();
    let spd = cfg.steps_per_day;

    let mut coord_rng = rng.stream("coords");
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            (
                coord_rng.uniform_in(0.0, 100.0),
                coord_rng.uniform_in(0.0, 100.0),
            )
        })
        .collect();

    let mut part_rng = rng.stream("partition");
    let (v1_ids, expanding_ids) =
        partition_variables(&coords, cfg.n_continual, cfg.partition, &mut part_rng)?;

    // Assign expanding sensors to stages in ascending id order.
    let boundaries = cfg.expansion_boundaries();
    let mut activation = vec![0usize; n];
    let mut cursor = 0;
    for (stage, &count) in cfg.n_expanding.iter().enumerate() {
        for _ in 0..count {
            activation[expanding_ids[cursor]] = boundaries[stage];
            cursor += 1;
        }
    }

    // Row-normalized affinity between distinct sensors.
    let mut affinity = vec![0.0; n * n];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            let w = (-(dx * dx + dy * dy) / (cfg.sigma_km * cfg.sigma_km)).exp();
            affinity[i * n + j] = w;
            row_sum += w;
        }
        if row_sum > 0.0 {
            for j in 0..n {
                affinity[i * n + j] /= row_sum;
            }
        }
    }

    // Per-variable seasonal profile.
    let mut season_rng = rng.stream("seasonal");
    let profiles: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            let amp = season_rng.uniform_in(cfg.amp_min, cfg.amp_max);
            let phase = season_rng.uniform_in(0.0, 2.0 * core::f64::consts::PI);
            let base = season_rng.uniform_in(cfg.base_min, cfg.base_max);
            (amp, phase, base)
        })
        .collect();

    // Latent diffusion: start at rest, push noise in, let it spread.
    let mut latent_rng = rng.stream("latent");
    let mut obs_rng = rng.stream("noise");
    let mut state = vec![0.0; n];
    let mut mixed = vec![0.0; n];
    let mut values = Tensor::zeros(&[t_total, n]);
    for t in 0..t_total {
        for i in 0..n {
            let neighbor: f64 = (0..n).map(|j| affinity[i * n + j] * state[j]).sum();
            mixed[i] = cfg.latent_decay
                * ((1.0 - cfg.coupling) * state[i] + cfg.coupling * neighbor)
                + cfg.latent_noise * latent_rng.standard_normal();
        }
        state.copy_from_slice(&mixed);
        let day_pos = 2.0 * core::f64::consts::PI * (t % spd) as f64 / spd as f64;
        for (v, &(amp, phase, base)) in profiles.iter().enumerate() {
            let reading = base
                + amp * (day_pos + phase).sin()
                + state[v]
                + cfg.obs_noise * obs_rng.standard_normal();
            values.set2(t, v, reading);
        }
    }

    let observed: Vec<bool> = (0..t_total)
        .flat_map(|t| (0..n).map(move |v| (t, v)))
        .map(|(t, v)| t >= activation[v])
        .collect();

    let ds = EvtsDataset {
        values,
        observed,
        steps_per_day: spd,
        coords,
        v1_ids,
        v2_ids: (0..n).collect(),
        expansion_steps: boundaries,
        activation_step: activation,
        splits: cfg.splits(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-variable z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this floor are clamped so constant series
/// normalize to zeros instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-6;

impl Normalizer {
    /// Fits per-variable statistics on training data: initial variables use
    /// the pre-expansion period, late arrivals use their observed slice of
    /// the post-expansion training period.
    pub fn fit(ds: &EvtsDataset) -> Result<Normalizer> {
        let n = ds.n_vars();
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for v in 0..n {
            let start = if ds.activation_step[v] == 0 {
                ds.splits.train1.start
            } else {
                ds.activation_step[v]
            };
            let end = if ds.activation_step[v] == 0 {
                ds.splits.train1.end
            } else {
                ds.splits.train2.end
            };
            let count = end.saturating_sub(start);
            if count < 2 {
                return Err(Error::Config(format!(
                    "variable {v} has only {count} training slots; cannot fit statistics"
                )));
            }
            let mut sum = 0.0;
            for t in start..end {
                debug_assert!(ds.is_observed(t, v));
                sum += ds.values.at2(t, v);
            }
            let mu = sum / count as f64;
            let mut ss = 0.0;
            for t in start..end {
                let d = ds.values.at2(t, v) - mu;
                ss += d * d;
            }
            mean[v] = mu;
            std[v] = (ss / count as f64).sqrt().max(STD_FLOOR);
        }
        Ok(Normalizer { mean, std })
    }

    #[inline]
    pub fn normalize_value(&self, var: usize, x: f64) -> f64 {
        (x - self.mean[var]) / self.std[var]
    }

    #[inline]
    pub fn denormalize_value(&self, var: usize, z: f64) -> f64 {
        z * self.std[var] + self.mean[var]
    }

    /// Copy of the dataset with every observed value z-scored. Unobserved
    /// cells are zeroed so they cannot leak physical values downstream.
    pub fn normalize_dataset(&self, ds: &EvtsDataset) -> EvtsDataset {
        let mut out = ds.clone();
        let n = ds.n_vars();
        for t in 0..ds.t_total() {
            for v in 0..n {
                let z = if ds.is_observed(t, v) {
                    self.normalize_value(v, ds.values.at2(t, v))
                } else {
                    0.0
                };
                out.values.set2(t, v, z);
            }
        }
        out
    }
}

/// One training/evaluation window: `n` aligned univariate rows of history
/// plus their forecasting targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Ascending variable ids, one per row.
    pub variable_ids: Vec<usize>,
    /// History, shape `(n, history_len)`.
    pub inputs: Tensor,
    /// Targets, shape `(n, horizon)`.
    pub targets: Tensor,
    /// Slot index of the last history step.
    pub ref_time: usize,
    /// Per row: the variable is a late arrival.
    pub expanding: Vec<bool>,
}

impl WindowSample {
    pub fn n_rows(&self) -> usize {
        self.variable_ids.len()
    }
}

/// Extracts every fully observed window of `history + horizon` slots whose
/// span lies inside `range`, at stride 1.
///
/// A window carries exactly the variables active for its entire span, so
/// windows that straddle an expansion boundary carry only the earlier
/// variable set. Windows are returned in ascending start order.
pub fn make_windows(
    ds: &EvtsDataset,
    range: SlotRange,
    history: usize,
    horizon: usize,
) -> Result<Vec<WindowSample>> {
    if history == 0 || horizon == 0 {
        return Err(Error::Config(
            "history and horizon must be at least 1".into(),
        ));
    }
    if range.end > ds.t_total() || range.is_empty() {
        return Err(Error::Config(format!(
            "window range {}..{} outside the panel (length {})",
            range.start,
            range.end,
            ds.t_total()
        )));
    }
    let span = history + horizon;
    let mut windows = Vec::new();
    if range.len() < span {
        return Ok(windows);
    }
    for start in range.start..=(range.end - span) {
        let vars = ds.active_at(start);
        debug_assert!(!vars.is_empty());
        let n = vars.len();
        let mut inputs = Tensor::zeros(&[n, history]);
        let mut targets = Tensor::zeros(&[n, horizon]);
        for (r, &v) in vars.iter().enumerate() {
            for h in 0..history {
                debug_assert!(ds.is_observed(start + h, v));
                inputs.set2(r, h, ds.values.at2(start + h, v));
            }
            for q in 0..horizon {
                debug_assert!(ds.is_observed(start + history + q, v));
                targets.set2(r, q, ds.values.at2(start + history + q, v));
            }
        }
        windows.push(WindowSample {
            expanding: vars.iter().map(|&v| ds.is_expanding(v)).collect(),
            variable_ids: vars,
            inputs,
            targets,
            ref_time: start + history - 1,
        });
    }
    Ok(windows)
}

/// Human-readable one-line summary used by the command-line front end.
pub fn describe(ds: &EvtsDataset) -> String {
    format!(
        "{} slots x {} variables ({} initial + {} expanding), expansion at {:?}, \
         splits {}/{}/{}/{}",
        ds.t_total(),
        ds.n_vars(),
        ds.v1_ids.len(),
        ds.n_vars() - ds.v1_ids.len(),
        ds.expansion_steps,
        ds.splits.train1.len(),
        ds.splits.train2.len(),
        ds.splits.valid.len(),
        ds.splits.test.len(),
    )
}
