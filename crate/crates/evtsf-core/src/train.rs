//! Training loop, imbalance strategies, and report assembly.
//!
//! Training pools every fully observed window from both training periods,
//! reshuffles the pool each epoch, and steps Adam on the joint loss of each
//! flattened mini-batch. Validation is forecast error alone, in physical
//! units, so early stopping compares identically across loss variants; the
//! parameters (and batch-norm statistics) of the best validation epoch are
//! what a run returns.
//!
//! Four pooling strategies address the scarcity of post-expansion data. The
//! default keeps the mixed-shape pool as-is. `Fptm` pads every window to the
//! full variable set with zero rows and masks their forecast error out of
//! the loss — the fixed-shape baseline. `Oversample` doubles the sampling
//! rate of post-expansion windows; `Augment` gives each post-expansion
//! window with late rows a mixup-blended duplicate.
//!
//! Every random choice derives from the run seed through named streams, so
//! a (config, seed) pair reproduces its curves bit for bit.

use crate::data::{make_windows, EvtsDataset, Normalizer, WindowSample};
use crate::flat::flatten;
use crate::metrics::{afmae, delta_gap, evaluate, SplitMetrics};
use crate::model::{Model, ModelConfig, Variant};
use crate::optim::{Adam, AdamHyper, EarlyStopper};
use crate::rng::{stream_name, StreamRng};
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

// Inherent f64 methods win under std; this import supplies exp/sqrt/etc.
// via libm when built without it.
#[allow(unused_imports)]
use num_traits::Float;

/// How the training pool handles the shape change at the expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Mixed-shape windows, flattened as they come.
    Stev,
    /// Fixed-shape baseline: every window zero-padded to the full variable
    /// set, padded rows masked out of the forecast loss.
    Fptm,
    /// Post-expansion windows enter the pool twice.
    Oversample,
    /// Post-expansion windows with late rows gain a mixup duplicate.
    Augment,
}

/// Everything a training run needs beyond the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub variant: Variant,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub lr: f64,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: the full loss on the mixed-shape path, batches of 16,
    /// Adam at 1e-3, patience 10 within 150 epochs.
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            variant: Variant::Focal,
            strategy: Strategy::Stev,
            batch_size: 16,
            lr: 1e-3,
            patience: 10,
            max_epochs: 150,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.strategy == Strategy::Fptm && self.variant != Variant::Flats {
            return Err(Error::Config(
                "the padding strategy masks rows out of the loss, which the \
                 contrastive pool cannot honor; use the forecast-only variant"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One epoch's running losses and validation error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Joint training loss, averaged over the epoch's rows.
    pub train_loss: f64,
    /// Contrastive part of the above; absent for forecast-only variants.
    pub train_cl: Option<f64>,
    /// Validation forecast MAE in physical units.
    pub val_mae: f64,
}

/// A finished training run: the best-validation model plus its history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best validation epoch's parameters and batch-norm
    /// statistics restored.
    pub model: Model,
    /// The scaler fitted on the training ranges; evaluation needs it to
    /// report physical units.
    pub normalizer: Normalizer,
    pub curves: Vec<EpochRecord>,
    /// 1-based epoch the returned parameters come from.
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Test-set scores and provenance of one run, ready for serialization.
/// The comparison columns stay empty until a reference run is attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub test: SplitMetrics,
    /// Overall-MAE gap to an oracle run, as a ratio ([`attach_oracle`]).
    pub delta_mae: Option<f64>,
    /// Overall-RMSE gap to an oracle run, as a ratio.
    pub delta_rmse: Option<f64>,
    /// Forgetting gap on the continual cohort vs a pre-expansion reference
    /// run ([`attach_reference`]).
    pub afmae: Option<f64>,
    pub curves: Vec<EpochRecord>,
}

/// One pool entry: a window plus, for the padding strategy, the rows whose
/// forecast error counts.
#[derive(Debug, Clone)]
struct TrainWindow {
    sample: WindowSample,
    mask: Option<Vec<bool>>,
}

fn plain(sample: WindowSample) -> TrainWindow {
    TrainWindow { sample, mask: None }
}

/// `out = lambda * a + (1 - lambda) * b`, element-wise.
fn blend_row(out: &mut [f64], a: &[f64], b: &[f64], lambda: f64) {
    for i in 0..out.len() {
        out[i] = lambda * a[i] + (1.0 - lambda) * b[i];
    }
}

/// A window copy whose late-arrival rows are blended toward a random
/// window-mate. History and targets share the row's blending weight, so the
/// duplicate stays a coherent series. Rows of initial variables, and
/// windows too small to offer a partner, copy through untouched.
fn mixup_duplicate(sample: &WindowSample, beta: f64, rng: &mut StreamRng) -> Result<WindowSample> {
    let n = sample.n_rows();
    let mut dup = sample.clone();
    if n < 2 {
        return Ok(dup);
    }
    for r in 0..n {
        if !sample.expanding[r] {
            continue;
        }
        let mut partner = rng.index(n - 1);
        if partner >= r {
            partner += 1;
        }
        let lambda = rng.beta(beta, beta)?;
        blend_row(
            dup.inputs.row_mut(r),
            sample.inputs.row(r),
            sample.inputs.row(partner),
            lambda,
        );
        blend_row(
            dup.targets.row_mut(r),
            sample.targets.row(r),
            sample.targets.row(partner),
            lambda,
        );
    }
    Ok(dup)
}

/// Pads a window to the full variable set with zero rows (zero is the
/// post-normalization mean, so padding is as bland as possible), returning
/// the padded sample and the mask of real rows.
fn pad_to_full(sample: &WindowSample, ds: &EvtsDataset) -> (WindowSample, Vec<bool>) {
    let all = &ds.v2_ids;
    let n = all.len();
    let history = sample.inputs.dim(1);
    let horizon = sample.targets.dim(1);
    let mut inputs = Tensor::zeros(&[n, history]);
    let mut targets = Tensor::zeros(&[n, horizon]);
    let mut mask = vec![false; n];
    let mut expanding = Vec::with_capacity(n);
    for (r, &v) in all.iter().enumerate() {
        expanding.push(ds.is_expanding(v));
        if let Ok(src) = sample.variable_ids.binary_search(&v) {
            inputs.row_mut(r).copy_from_slice(sample.inputs.row(src));
            targets.row_mut(r).copy_from_slice(sample.targets.row(src));
            mask[r] = true;
        }
    }
    (
        WindowSample {
            variable_ids: all.clone(),
            inputs,
            targets,
            ref_time: sample.ref_time,
            expanding,
        },
        mask,
    )
}

/// Builds the training pool from both training periods, applying the
/// strategy's reshaping. `nds` must already be normalized.
fn build_pool(nds: &EvtsDataset, cfg: &TrainConfig, root: &StreamRng) -> Result<Vec<TrainWindow>> {
    let history = cfg.model.stfe.history;
    let horizon = cfg.model.stfe.horizon;
    let t1 = make_windows(nds, nds.splits.train1, history, horizon)?;
    let t2 = make_windows(nds, nds.splits.train2, history, horizon)?;
    if t1.is_empty() && t2.is_empty() {
        return Err(Error::Config(
            "training ranges are too short for a single window".into(),
        ));
    }
    let mut pool = Vec::new();
    match cfg.strategy {
        Strategy::Stev => {
            pool.extend(t1.into_iter().map(plain));
            pool.extend(t2.into_iter().map(plain));
        }
        Strategy::Oversample => {
            pool.extend(t1.into_iter().map(plain));
            pool.extend(t2.iter().cloned().map(plain));
            pool.extend(t2.into_iter().map(plain));
        }
        Strategy::Augment => {
            pool.extend(t1.into_iter().map(plain));
            let mut rng = root.stream("augment-pool");
            for w in t2 {
                let dup = if w.expanding.iter().any(|&e| e) {
                    Some(mixup_duplicate(&w, cfg.model.augment.mixup_beta, &mut rng)?)
                } else {
                    None
                };
                pool.push(plain(w));
                if let Some(d) = dup {
                    pool.push(plain(d));
                }
            }
        }
        Strategy::Fptm => {
            for w in t1.iter().chain(t2.iter()) {
                let (padded, mask) = pad_to_full(w, nds);
                pool.push(TrainWindow {
                    sample: padded,
                    mask: Some(mask),
                });
            }
        }
    }
    Ok(pool)
}

/// Concatenated row mask for a mini-batch, or `None` when every member is
/// unmasked.
fn batch_mask(members: &[&TrainWindow]) -> Option<Vec<bool>> {
    if members.iter().all(|w| w.mask.is_none()) {
        return None;
    }
    let mut mask = Vec::new();
    for w in members {
        match &w.mask {
            Some(m) => mask.extend_from_slice(m),
            None => mask.resize(mask.len() + w.sample.n_rows(), true),
        }
    }
    Some(mask)
}

/// Trains a fresh model on the dataset's training ranges.
///
/// Stops early after `patience` consecutive epochs without a new best
/// validation MAE, and aborts with a diagnostic naming the epoch and step
/// if the loss leaves the finite range.
pub fn train(ds: &EvtsDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    if cfg.model.graph.n_vars != ds.n_vars() || cfg.model.graph.steps_per_day != ds.steps_per_day {
        return Err(Error::Config(format!(
            "model expects {} variables at {} slots/day, dataset has {} at {}",
            cfg.model.graph.n_vars,
            cfg.model.graph.steps_per_day,
            ds.n_vars(),
            ds.steps_per_day
        )));
    }

    let normalizer = Normalizer::fit(ds)?;
    let nds = normalizer.normalize_dataset(ds);
    let root = StreamRng::from_seed(cfg.seed);
    let pool = build_pool(&nds, cfg, &root)?;

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(
        &model.params,
        AdamHyper {
            lr: cfg.lr,
            ..AdamHyper::default()
        },
    );
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut curves = Vec::new();
    let mut best = None;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        root.stream(&stream_name("shuffle-epoch", epoch))
            .shuffle(&mut order);

        let mut joint_sum = 0.0;
        let mut cl_sum = 0.0;
        let mut rows_sum = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let members: Vec<&TrainWindow> = chunk.iter().map(|&i| &pool[i]).collect();
            let samples: Vec<WindowSample> = members.iter().map(|w| w.sample.clone()).collect();
            let batch = flatten(&samples)?;
            let mask = batch_mask(&members);
            let mut aug_rng = root.stream(&format!("augment-{epoch}-{step}"));
            let out =
                model.forward_train(&batch, cfg.variant, mask.as_deref(), true, &mut aug_rng)?;
            if !out.joint.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch}, step {}",
                    step + 1
                )));
            }
            adam.step(&mut model.params, &out.grads)?;
            let rows = batch.n_rows() as f64;
            joint_sum += out.joint * rows;
            cl_sum += out.contrastive * rows;
            rows_sum += batch.n_rows();
        }

        let rows_sum = rows_sum as f64;
        let val = evaluate(&model, ds, &normalizer, ds.splits.valid, cfg.batch_size)?;
        let val_mae = val
            .overall
            .ok_or_else(|| Error::Config("validation range yields no windows".into()))?
            .mae;
        if !val_mae.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation error diverged at epoch {epoch}"
            )));
        }
        curves.push(EpochRecord {
            epoch,
            train_loss: joint_sum / rows_sum,
            train_cl: cfg.variant.uses_contrast().then(|| cl_sum / rows_sum),
            val_mae,
        });

        let (improved, stop) = stopper.observe(val_mae);
        if improved {
            best = Some((epoch, model.params.clone(), model.bn.clone()));
        }
        if stop {
            break;
        }
    }

    let (best_epoch, best_params, best_bn) =
        best.ok_or_else(|| Error::State("training recorded no epochs".into()))?;
    model.params = best_params;
    model.bn = best_bn;
    Ok(TrainOutcome {
        model,
        normalizer,
        curves,
        best_epoch,
        best_val_mae: stopper.best(),
    })
}

/// Scores a finished run on the dataset's test range and assembles its
/// report (comparison columns empty).
pub fn report_for(
    ds: &EvtsDataset,
    cfg: &TrainConfig,
    outcome: &TrainOutcome,
) -> Result<MetricsReport> {
    let test = evaluate(
        &outcome.model,
        ds,
        &outcome.normalizer,
        ds.splits.test,
        cfg.batch_size,
    )?;
    test.validate()?;
    Ok(MetricsReport {
        config: cfg.clone(),
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val_mae,
        test,
        delta_mae: None,
        delta_rmse: None,
        afmae: None,
        curves: outcome.curves.clone(),
    })
}

/// Trains and scores in one call.
pub fn run_strategy(ds: &EvtsDataset, cfg: &TrainConfig) -> Result<(TrainOutcome, MetricsReport)> {
    let outcome = train(ds, cfg)?;
    let report = report_for(ds, cfg, &outcome)?;
    Ok((outcome, report))
}

/// Fills a report's oracle-gap columns from an oracle run's report
/// (overall-group errors, as ratios).
pub fn attach_oracle(report: &mut MetricsReport, oracle: &MetricsReport) -> Result<()> {
    let mine = report
        .test
        .overall
        .ok_or_else(|| Error::Config("report carries no overall scores".into()))?;
    let theirs = oracle
        .test
        .overall
        .ok_or_else(|| Error::Config("oracle report carries no overall scores".into()))?;
    report.delta_mae = Some(delta_gap(mine.mae, theirs.mae)?);
    report.delta_rmse = Some(delta_gap(mine.rmse, theirs.rmse)?);
    Ok(())
}

/// Fills a report's forgetting column from a reference run trained before
/// the expansion: continual-cohort MAE difference.
pub fn attach_reference(report: &mut MetricsReport, old: &MetricsReport) -> Result<()> {
    let mine = report
        .test
        .continual
        .ok_or_else(|| Error::Config("report carries no continual-cohort scores".into()))?;
    let theirs = old.test.continual.ok_or_else(|| {
        Error::Config("reference report carries no continual-cohort scores".into())
    })?;
    report.afmae = Some(afmae(mine.mae, theirs.mae));
    Ok(())
}

/// Runs the four-variant ladder over the given seeds (variant-major order)
/// and returns one report per cell.
pub fn run_ablation(
    ds: &EvtsDataset,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let ladder = [
        Variant::Flats,
        Variant::FlatsCl,
        Variant::FlatsNf,
        Variant::Focal,
    ];
    let mut reports = Vec::with_capacity(ladder.len() * seeds.len());
    for variant in ladder {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            let (_, report) = run_strategy(ds, &cfg)?;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Sweeps the late-arrival temperature multiplier over `alphas` (alpha-major
/// order) with the full-loss variant, one report per (alpha, seed) cell.
pub fn alpha_sweep(
    ds: &EvtsDataset,
    base: &TrainConfig,
    alphas: &[f64],
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "a sweep needs at least one alpha and one seed".into(),
        ));
    }
    let mut reports = Vec::with_capacity(alphas.len() * seeds.len());
    for &alpha in alphas {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.variant = Variant::Focal;
            cfg.model.alpha = alpha;
            cfg.seed = seed;
            let (_, report) = run_strategy(ds, &cfg)?;
            reports.push(report);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GenConfig};
    use crate::metrics::GroupScores;
    use crate::model::Variant;
    use approx::assert_abs_diff_eq;

    fn small_panel() -> EvtsDataset {
        let cfg = GenConfig {
            n_continual: 4,
            n_expanding: vec![2],
            steps_per_day: 12,
            days_p1: 10,
            days_p2: vec![2],
            days_valid: 1,
            days_test: 2,
            ..GenConfig::default()
        };
        generate_synthetic(&cfg, &StreamRng::from_seed(21)).unwrap()
    }

    fn tiny_cfg(ds: &EvtsDataset) -> TrainConfig {
        let mut model = ModelConfig::new(ds.n_vars(), ds.steps_per_day, 6, 3);
        model.graph.node_dim = 3;
        model.graph.time_dim = 2;
        model.stfe.channels = 4;
        model.stfe.blocks = 1;
        model.stfe.layers_per_block = 2;
        model.stfe.cheb_order = 2;
        model.stfe.head_hidden = 3;
        model.proj_dim = 3;
        let mut cfg = TrainConfig::new(model);
        cfg.batch_size = 8;
        cfg.max_epochs = 2;
        cfg.seed = 3;
        cfg
    }

    // The small panel yields 112 pre-expansion and 16 post-expansion
    // windows (120 and 24 slots, 9-slot span).
    const T1_WINDOWS: usize = 112;
    const T2_WINDOWS: usize = 16;

    fn pool_for(ds: &EvtsDataset, cfg: &TrainConfig) -> Vec<TrainWindow> {
        let norm = Normalizer::fit(ds).unwrap();
        let nds = norm.normalize_dataset(ds);
        build_pool(&nds, cfg, &StreamRng::from_seed(cfg.seed)).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let ds = small_panel();
        let good = tiny_cfg(&ds);
        good.validate().unwrap();

        let mut cfg = good.clone();
        cfg.strategy = Strategy::Fptm;
        cfg.variant = Variant::Focal;
        assert!(cfg.validate().is_err());
        cfg.variant = Variant::Flats;
        cfg.validate().unwrap();

        let mut cfg = good.clone();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = good.clone();
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = good.clone();
        cfg.max_epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = good;
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.model.graph.n_vars = 5;
        assert!(matches!(train(&ds, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn one_epoch_cap_yields_one_record() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.max_epochs = 1;
        let (outcome, report) = run_strategy(&ds, &cfg).unwrap();
        assert_eq!(outcome.curves.len(), 1);
        assert_eq!(outcome.best_epoch, 1);
        assert_eq!(report.curves, outcome.curves);
        assert!(report.delta_mae.is_none());
        assert!(report.afmae.is_none());
        report.test.validate().unwrap();
    }

    #[test]
    fn same_seed_reproduces_curves_bitwise() {
        let ds = small_panel();
        let cfg = tiny_cfg(&ds);
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.best_val_mae, b.best_val_mae);
        assert_eq!(
            a.model.params.value(a.model.proj_ids.weight).data(),
            b.model.params.value(b.model.proj_ids.weight).data()
        );

        let mut other = cfg;
        other.seed = 4;
        let c = train(&ds, &other).unwrap();
        assert_ne!(a.curves, c.curves);
    }

    #[test]
    fn the_returned_model_is_the_best_validation_epoch() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.max_epochs = 6;
        cfg.patience = 1;
        let outcome = train(&ds, &cfg).unwrap();

        let vals: Vec<f64> = outcome.curves.iter().map(|r| r.val_mae).collect();
        let argmin = vals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(outcome.best_epoch, argmin + 1);
        assert_eq!(outcome.best_val_mae, vals[argmin]);

        // Either the cap was hit, or the run stopped after exactly
        // `patience` non-improving epochs.
        if outcome.curves.len() < cfg.max_epochs {
            assert!(vals.last().unwrap() >= &outcome.best_val_mae);
            assert_eq!(argmin + 1 + cfg.patience, outcome.curves.len());
        }

        // Restoration check: scoring the returned model on the validation
        // range reproduces the recorded best exactly.
        let again = evaluate(
            &outcome.model,
            &ds,
            &outcome.normalizer,
            ds.splits.valid,
            cfg.batch_size,
        )
        .unwrap();
        assert_eq!(again.overall.unwrap().mae, outcome.best_val_mae);
    }

    #[test]
    fn forecast_only_runs_report_no_contrastive_curve() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.max_epochs = 1;
        cfg.variant = Variant::Flats;
        let outcome = train(&ds, &cfg).unwrap();
        assert!(outcome.curves.iter().all(|r| r.train_cl.is_none()));

        cfg.variant = Variant::Focal;
        let outcome = train(&ds, &cfg).unwrap();
        assert!(outcome.curves.iter().all(|r| r.train_cl.is_some()));
        assert!(outcome.curves[0].train_cl.unwrap() > 0.0);
    }

    #[test]
    fn oversampling_doubles_the_post_expansion_pool() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        assert_eq!(pool_for(&ds, &cfg).len(), T1_WINDOWS + T2_WINDOWS);
        cfg.strategy = Strategy::Oversample;
        assert_eq!(pool_for(&ds, &cfg).len(), T1_WINDOWS + 2 * T2_WINDOWS);
    }

    #[test]
    fn augmentation_blends_only_late_rows_with_one_shared_weight() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.strategy = Strategy::Augment;
        let pool = pool_for(&ds, &cfg);
        // Every post-expansion window carries late rows, so each gains one
        // duplicate, interleaved right after its original.
        assert_eq!(pool.len(), T1_WINDOWS + 2 * T2_WINDOWS);

        let orig = &pool[T1_WINDOWS].sample;
        let dup = &pool[T1_WINDOWS + 1].sample;
        assert_eq!(orig.variable_ids, dup.variable_ids);
        for r in 0..orig.n_rows() {
            if !orig.expanding[r] {
                assert_eq!(orig.inputs.row(r), dup.inputs.row(r));
                assert_eq!(orig.targets.row(r), dup.targets.row(r));
                continue;
            }
            // The blended row must be an affine mix of the original row and
            // some window-mate, with one weight shared by history and
            // targets.
            let mut explained = false;
            'partners: for p in 0..orig.n_rows() {
                if p == r {
                    continue;
                }
                let denom = orig.inputs.at2(r, 0) - orig.inputs.at2(p, 0);
                if denom.abs() < 1e-9 {
                    continue;
                }
                let lambda = (dup.inputs.at2(r, 0) - orig.inputs.at2(p, 0)) / denom;
                if !(0.0..=1.0).contains(&lambda) {
                    continue;
                }
                for c in 0..orig.inputs.dim(1) {
                    let want =
                        lambda * orig.inputs.at2(r, c) + (1.0 - lambda) * orig.inputs.at2(p, c);
                    if (dup.inputs.at2(r, c) - want).abs() > 1e-9 {
                        continue 'partners;
                    }
                }
                for c in 0..orig.targets.dim(1) {
                    let want =
                        lambda * orig.targets.at2(r, c) + (1.0 - lambda) * orig.targets.at2(p, c);
                    if (dup.targets.at2(r, c) - want).abs() > 1e-9 {
                        continue 'partners;
                    }
                }
                explained = true;
                break;
            }
            assert!(explained, "row {r} is not a coherent blend");
        }
    }

    #[test]
    fn padding_fills_every_window_to_the_full_variable_set() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.strategy = Strategy::Fptm;
        cfg.variant = Variant::Flats;
        let pool = pool_for(&ds, &cfg);
        assert_eq!(pool.len(), T1_WINDOWS + T2_WINDOWS);
        for (i, w) in pool.iter().enumerate() {
            assert_eq!(w.sample.variable_ids, ds.v2_ids);
            let mask = w.mask.as_ref().unwrap();
            let real = mask.iter().filter(|&&m| m).count();
            if i < T1_WINDOWS {
                // Pre-expansion windows: late rows are zero padding.
                assert_eq!(real, 4);
                for (r, &m) in mask.iter().enumerate() {
                    assert_eq!(m, !w.sample.expanding[r]);
                    if !m {
                        assert!(w.sample.inputs.row(r).iter().all(|&v| v == 0.0));
                    }
                }
            } else {
                assert_eq!(real, 6);
            }
        }
    }

    #[test]
    fn padded_targets_cannot_leak_into_the_loss() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.strategy = Strategy::Fptm;
        cfg.variant = Variant::Flats;
        let pool = pool_for(&ds, &cfg);

        let w = &pool[0]; // a padded pre-expansion window
        let mask = w.mask.clone().unwrap();
        assert!(mask.iter().any(|&m| !m));
        let batch = flatten(core::slice::from_ref(&w.sample)).unwrap();
        let mut model = Model::new(cfg.model.clone(), 9).unwrap();
        let base = model
            .forward_train_with_view(&batch, Variant::Flats, Some(&mask), false, None)
            .unwrap();

        // Garbage in the padded rows' targets must change nothing.
        let mut poisoned = batch.clone();
        for (r, &m) in mask.iter().enumerate() {
            if !m {
                poisoned.targets.row_mut(r).fill(1e6);
            }
        }
        let out = model
            .forward_train_with_view(&poisoned, Variant::Flats, Some(&mask), false, None)
            .unwrap();
        assert_eq!(base.joint, out.joint);
        assert_eq!(base.mae, out.mae);
    }

    #[test]
    fn padded_and_plain_paths_train_to_different_curves() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.variant = Variant::Flats;
        cfg.max_epochs = 2;
        let plain_run = train(&ds, &cfg).unwrap();
        cfg.strategy = Strategy::Fptm;
        let padded_run = train(&ds, &cfg).unwrap();
        // Padding rows join batch normalization and the graph, so the two
        // paths genuinely diverge.
        assert_ne!(plain_run.curves, padded_run.curves);
    }

    #[test]
    fn ablation_covers_the_ladder_in_order() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.max_epochs = 1;
        let reports = run_ablation(&ds, &cfg, &[3]).unwrap();
        let variants: Vec<Variant> = reports.iter().map(|r| r.config.variant).collect();
        assert_eq!(
            variants,
            [
                Variant::Flats,
                Variant::FlatsCl,
                Variant::FlatsNf,
                Variant::Focal
            ]
        );
        assert!(reports.iter().all(|r| r.config.seed == 3));
        assert!(reports[0].curves[0].train_cl.is_none());
        assert!(reports[3].curves[0].train_cl.is_some());
        assert!(run_ablation(&ds, &cfg, &[]).is_err());
    }

    #[test]
    fn alpha_sweep_echoes_each_cell() {
        let ds = small_panel();
        let mut cfg = tiny_cfg(&ds);
        cfg.max_epochs = 1;
        let reports = alpha_sweep(&ds, &cfg, &[0.3, 1.0], &[3]).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports.iter().all(|r| r.config.variant == Variant::Focal));
        assert_abs_diff_eq!(reports[0].config.model.alpha, 0.3);
        assert_abs_diff_eq!(reports[1].config.model.alpha, 1.0);

        // A zero multiplier fails config validation inside the run.
        assert!(alpha_sweep(&ds, &cfg, &[0.0], &[3]).is_err());
        assert!(alpha_sweep(&ds, &cfg, &[], &[3]).is_err());
    }

    #[test]
    fn reference_attachment_fills_the_comparison_columns() {
        let ds = small_panel();
        let cfg = tiny_cfg(&ds);
        let scores = |mae: f64| GroupScores {
            mae,
            rmse: mae * 1.2,
            cells: 10,
        };
        let stub = |mae: f64| MetricsReport {
            config: cfg.clone(),
            best_epoch: 1,
            best_val_mae: mae,
            test: SplitMetrics {
                continual: Some(scores(mae)),
                expanding: Some(scores(mae * 1.5)),
                overall: Some(scores(mae * 1.25)),
            },
            delta_mae: None,
            delta_rmse: None,
            afmae: None,
            curves: Vec::new(),
        };

        let mut report = stub(2.0);
        let oracle = stub(1.6);
        attach_oracle(&mut report, &oracle).unwrap();
        assert_abs_diff_eq!(
            report.delta_mae.unwrap(),
            (2.5 - 2.0) / 2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            report.delta_rmse.unwrap(),
            (3.0 - 2.4) / 2.4,
            epsilon = 1e-12
        );

        let reference = stub(1.9);
        attach_reference(&mut report, &reference).unwrap();
        assert_abs_diff_eq!(report.afmae.unwrap(), 2.0 - 1.9, epsilon = 1e-12);

        // Missing groups are a hard error, not a silent zero.
        let mut empty = stub(2.0);
        empty.test.overall = None;
        assert!(attach_oracle(&mut empty.clone(), &oracle).is_err());
        let mut no_cont = stub(2.0);
        no_cont.test.continual = None;
        assert!(attach_reference(&mut report, &no_cont).is_err());
    }
}
