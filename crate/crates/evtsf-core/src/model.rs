//! The assembled forecaster: adjacency learner, encoder, forecast head and
//! latent projection behind one parameter set.
//!
//! A training step runs the original windows through the encoder and head to
//! get the forecast error, and — unless the variant is forecast-only — runs
//! an augmented copy of the rows through the same encoder, projects both
//! feature sets into the latent space, and adds the contrastive term. Both
//! views share one set of per-window graphs, so their Laplacian gradients
//! accumulate into the same buffers before flowing back to the embedding
//! tables. Inference clones the running batch-norm statistics and never
//! mutates the model.

use crate::contrast::{
    augment, focal_contrastive_loss, focal_temperatures, mae_loss, normalize_rows,
    normalize_rows_backward, project, project_backward, register_projection, AugmentConfig,
    ContrastiveBundle, NegativeSet, ProjParamIds, Similarity,
};
use crate::flat::FlatBatch;
use crate::graph::{register_graph_params, BatchGraphs, GraphConfig, GraphParamIds};
use crate::rng::StreamRng;
use crate::stfe::{
    output_head, output_head_backward, register_stfe_params, stfe_backward, stfe_forward, BnState,
    Mode, StfeConfig, StfeParamIds,
};
use crate::tensor::{GradSet, ParamSet, Tensor};
use crate::{Error, Result};
use alloc::format;
use serde::{Deserialize, Serialize};

// Inherent f64 methods win under std; this import supplies exp/sqrt/etc.
// via libm when built without it.
#[allow(unused_imports)]
use num_traits::Float;

/// Which loss terms a training step computes.
///
/// The ladder adds one ingredient at a time: `Flats` trains on forecast
/// error alone; `FlatsCl` adds the contrastive term with every other row
/// admitted as a negative; `FlatsNf` excludes a row's window-mates from the
/// negative pool; `Focal` additionally sharpens the temperature of rows
/// belonging to late-arriving variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Flats,
    FlatsCl,
    FlatsNf,
    Focal,
}

impl Variant {
    /// Whether this variant runs the augmented view and contrastive loss.
    pub fn uses_contrast(self) -> bool {
        self != Variant::Flats
    }
}

/// Everything needed to build a [`Model`]: component sizes plus the
/// contrastive hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub graph: GraphConfig,
    pub stfe: StfeConfig,
    /// Width of the latent space the contrastive loss compares in.
    pub proj_dim: usize,
    /// Base softmax temperature.
    pub tau: f64,
    /// Temperature multiplier applied to rows of late-arriving variables
    /// (only by [`Variant::Focal`]); 1 leaves them untouched.
    pub alpha: f64,
    pub similarity: Similarity,
    pub augment: AugmentConfig,
}

impl ModelConfig {
    /// Default sizes for a dataset's variable count, calendar and window
    /// geometry.
    pub fn new(n_vars: usize, steps_per_day: usize, history: usize, horizon: usize) -> Self {
        Self {
            graph: GraphConfig::new(n_vars, steps_per_day),
            stfe: StfeConfig::new(history, horizon),
            proj_dim: 32,
            tau: 0.5,
            alpha: 0.3,
            similarity: Similarity::Dot,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.stfe.validate()?;
        self.augment.validate()?;
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "temperature multiplier must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Losses, forecasts and parameter gradients from one training step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Training objective: contrastive term plus forecast error.
    pub joint: f64,
    /// Mean absolute forecast error (over unmasked rows).
    pub mae: f64,
    /// Contrastive term; exactly zero for [`Variant::Flats`].
    pub contrastive: f64,
    /// Forecasts for every row, `(rows, horizon)`.
    pub y_hat: Tensor,
    /// Gradients of the joint objective for every parameter.
    pub grads: GradSet,
}

/// The full forecaster. Parameters live in one [`ParamSet`] (registered
/// graph tables first, then encoder, then projection — checkpoint order
/// relies on this); batch-norm running statistics ride along as `bn`.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub graph_ids: GraphParamIds,
    pub stfe_ids: StfeParamIds,
    pub proj_ids: ProjParamIds,
    pub bn: BnState,
}

impl Model {
    /// Fresh model with all parameters drawn from the seed's `"init"`
    /// stream, in registration order.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = StreamRng::from_seed(seed).stream("init");
        let graph_ids = register_graph_params(&cfg.graph, &mut params, &mut rng);
        let stfe_ids = register_stfe_params(&cfg.stfe, &mut params, &mut rng);
        let proj_ids = register_projection(cfg.stfe.channels, cfg.proj_dim, &mut params, &mut rng);
        let bn = BnState::new(&cfg.stfe);
        Ok(Self {
            cfg,
            params,
            graph_ids,
            stfe_ids,
            proj_ids,
            bn,
        })
    }

    /// One training step: losses plus gradients for every parameter.
    ///
    /// `row_mask`, when present, restricts the forecast error to the marked
    /// rows (for batches padded with placeholder rows) and is only accepted
    /// for [`Variant::Flats`] — placeholder rows must never enter the
    /// contrastive pool. `update_running` refreshes the batch-norm running
    /// statistics from the original view; the augmented view never touches
    /// them. The RNG drives the augmentation draw.
    pub fn forward_train(
        &mut self,
        batch: &FlatBatch,
        variant: Variant,
        row_mask: Option<&[bool]>,
        update_running: bool,
        rng: &mut StreamRng,
    ) -> Result<StepOutput> {
        let aug = if variant.uses_contrast() {
            Some(augment(batch, &self.cfg.augment, rng)?)
        } else {
            None
        };
        self.forward_train_with_view(batch, variant, row_mask, update_running, aug.as_ref())
    }

    /// [`Model::forward_train`] with the augmented view supplied explicitly
    /// instead of drawn from an RNG — gradient checks need the view held
    /// fixed while parameters are perturbed.
    pub fn forward_train_with_view(
        &mut self,
        batch: &FlatBatch,
        variant: Variant,
        row_mask: Option<&[bool]>,
        update_running: bool,
        aug_rows: Option<&Tensor>,
    ) -> Result<StepOutput> {
        match (variant.uses_contrast(), aug_rows.is_some()) {
            (true, false) => {
                return Err(Error::Config(
                    "this variant needs an augmented view of the batch".into(),
                ))
            }
            (false, true) => {
                return Err(Error::Config(
                    "the forecast-only variant takes no augmented view".into(),
                ))
            }
            _ => {}
        }
        if row_mask.is_some() && variant.uses_contrast() {
            return Err(Error::Config(
                "row masks require the forecast-only variant; masked-out rows \
                 must not enter the contrastive pool"
                    .into(),
            ));
        }

        let graphs = BatchGraphs::build(&self.cfg.graph, &self.params, &self.graph_ids, batch)?;
        let mut grads = self.params.new_grads();
        let mut d_laplacians = graphs.laplacian_grad_buffers();

        // Original view: encoder, head, forecast error.
        let (h, cache) = stfe_forward(
            &self.cfg.stfe,
            &self.params,
            &self.stfe_ids,
            &mut self.bn,
            update_running,
            &batch.rows,
            batch,
            &graphs,
            Mode::Train,
        )?;
        let (y_hat, head_cache) = output_head(&self.cfg.stfe, &self.params, &self.stfe_ids, &h)?;
        let (mae, d_y) = match row_mask {
            Some(mask) => masked_mae_loss(&y_hat, &batch.targets, mask)?,
            None => mae_loss(&y_hat, &batch.targets)?,
        };
        let mut d_h = output_head_backward(
            &self.cfg.stfe,
            &self.params,
            &self.stfe_ids,
            &head_cache,
            &d_y,
            &mut grads,
        )?;

        // Augmented view and contrastive term.
        let mut contrastive = 0.0;
        let mut aug_pass = None;
        if let Some(aug) = aug_rows {
            let (h_aug, cache_aug) = stfe_forward(
                &self.cfg.stfe,
                &self.params,
                &self.stfe_ids,
                &mut self.bn,
                false,
                aug,
                batch,
                &graphs,
                Mode::Train,
            )?;
            let z = project(&self.params, &self.proj_ids, &h)?;
            let z_aug = project(&self.params, &self.proj_ids, &h_aug)?;
            let alpha_eff = match variant {
                Variant::Focal => self.cfg.alpha,
                _ => 1.0,
            };
            let tau_vec = focal_temperatures(&batch.expanding, self.cfg.tau, alpha_eff)?;
            let negatives = match variant {
                Variant::FlatsCl => NegativeSet::All,
                _ => NegativeSet::OutsideSubgraph,
            };
            let (l_cl, d_z, d_z_aug) = match self.cfg.similarity {
                Similarity::Dot => {
                    let bundle = ContrastiveBundle::new(z, z_aug, tau_vec)?;
                    focal_contrastive_loss(&bundle, &batch.subgraph_id, negatives)?
                }
                Similarity::Cosine => {
                    let (z_n, norms) = normalize_rows(&z);
                    let (z_aug_n, norms_aug) = normalize_rows(&z_aug);
                    let bundle = ContrastiveBundle::new(z_n, z_aug_n, tau_vec)?;
                    let (l, d_zn, d_zan) =
                        focal_contrastive_loss(&bundle, &batch.subgraph_id, negatives)?;
                    (
                        l,
                        normalize_rows_backward(&z, &norms, &d_zn),
                        normalize_rows_backward(&z_aug, &norms_aug, &d_zan),
                    )
                }
            };
            contrastive = l_cl;
            let d_h_proj = project_backward(&self.params, &self.proj_ids, &h, &d_z, &mut grads)?;
            d_h.add_scaled(&d_h_proj, 1.0);
            let d_h_aug =
                project_backward(&self.params, &self.proj_ids, &h_aug, &d_z_aug, &mut grads)?;
            aug_pass = Some((cache_aug, d_h_aug));
        }

        // Back through the encoder: original view, then (sharing the graph
        // gradient buffers) the augmented one, then the graphs themselves.
        stfe_backward(
            &self.cfg.stfe,
            &self.params,
            &self.stfe_ids,
            &cache,
            batch,
            &graphs,
            &d_h,
            &mut grads,
            &mut d_laplacians,
        )?;
        if let Some((cache_aug, d_h_aug)) = aug_pass {
            stfe_backward(
                &self.cfg.stfe,
                &self.params,
                &self.stfe_ids,
                &cache_aug,
                batch,
                &graphs,
                &d_h_aug,
                &mut grads,
                &mut d_laplacians,
            )?;
        }
        graphs.backward(&self.cfg.graph, &self.graph_ids, &d_laplacians, &mut grads)?;

        Ok(StepOutput {
            joint: contrastive + mae,
            mae,
            contrastive,
            y_hat,
            grads,
        })
    }

    /// Forecasts for a batch using frozen statistics. Rows are normalized
    /// independently, so a window's forecast cannot depend on what else
    /// shares the batch. The model itself is untouched.
    pub fn predict(&self, batch: &FlatBatch) -> Result<Tensor> {
        let graphs = BatchGraphs::build(&self.cfg.graph, &self.params, &self.graph_ids, batch)?;
        let mut bn = self.bn.clone();
        let (h, _) = stfe_forward(
            &self.cfg.stfe,
            &self.params,
            &self.stfe_ids,
            &mut bn,
            false,
            &batch.rows,
            batch,
            &graphs,
            Mode::Eval,
        )?;
        let (y, _) = output_head(&self.cfg.stfe, &self.params, &self.stfe_ids, &h)?;
        Ok(y)
    }
}

/// Mean absolute error over the marked rows only, with its subgradient
/// (zero at ties and on masked-out rows). The mean runs over the marked
/// rows' cells, so placeholder rows dilute nothing.
pub fn masked_mae_loss(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "forecast {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let rows = pred.dim(0);
    if mask.len() != rows {
        return Err(Error::Shape(format!(
            "{} mask entries for {rows} rows",
            mask.len()
        )));
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(Error::Config("row mask excludes every row".into()));
    }
    let n = (kept * pred.dim(1)) as f64;
    let mut total = 0.0;
    let mut d_pred = Tensor::zeros(pred.shape());
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let (p_row, y_row) = (pred.row(r), target.row(r));
        let d_row = d_pred.row_mut(r);
        for q in 0..p_row.len() {
            let diff = p_row[q] - y_row[q];
            total += diff.abs();
            d_row[q] = if diff > 0.0 {
                1.0 / n
            } else if diff < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok((total / n, d_pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WindowSample;
    use crate::flat::flatten;
    use crate::gradcheck::{finite_diff_check, CheckConfig};
    use crate::tensor::{dot, ParamId};
    use alloc::vec;
    use alloc::vec::Vec;
    use approx::assert_abs_diff_eq;

    /// Small geometry throughout: 2 + 3 rows, 4 channels, one block of two
    /// layers, forecasts two steps from three.
    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::new(5, 6, 3, 2);
        cfg.graph.node_dim = 3;
        cfg.graph.time_dim = 2;
        cfg.stfe.channels = 4;
        cfg.stfe.blocks = 1;
        cfg.stfe.layers_per_block = 2;
        cfg.stfe.cheb_order = 2;
        cfg.stfe.head_hidden = 3;
        cfg.proj_dim = 3;
        cfg
    }

    fn window(
        ids: &[usize],
        ref_time: usize,
        expanding: &[bool],
        cfg: &ModelConfig,
        rng: &mut StreamRng,
    ) -> WindowSample {
        let n = ids.len();
        WindowSample {
            variable_ids: ids.to_vec(),
            inputs: Tensor::randn(&[n, cfg.stfe.history], 1.0, rng),
            targets: Tensor::randn(&[n, cfg.stfe.horizon], 1.0, rng),
            ref_time,
            expanding: expanding.to_vec(),
        }
    }

    /// Two windows sharing variable 0; variables 3 and 4 are late arrivals,
    /// so the batch exercises both temperature tiers.
    fn batch(cfg: &ModelConfig, seed: u64) -> FlatBatch {
        let mut rng = StreamRng::from_seed(seed).stream("windows");
        flatten(&[
            window(&[0, 1], 9, &[false, false], cfg, &mut rng),
            window(&[0, 3, 4], 22, &[false, true, true], cfg, &mut rng),
        ])
        .unwrap()
    }

    #[test]
    fn default_config_validates() {
        let cfg = ModelConfig::new(7, 24, 12, 12);
        cfg.validate().unwrap();
        assert_eq!(cfg.proj_dim, 32);
        assert_eq!(cfg.similarity, Similarity::Dot);
        assert_abs_diff_eq!(cfg.tau, 0.5);
        assert_abs_diff_eq!(cfg.alpha, 0.3);
    }

    #[test]
    fn config_rejects_degenerate_hyperparameters() {
        let mut cfg = tiny_cfg();
        cfg.proj_dim = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg();
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());

        // Component validation is wired through.
        let mut cfg = tiny_cfg();
        cfg.stfe.kernel = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forecast_only_variant_skips_the_contrastive_machinery() {
        let cfg = tiny_cfg();
        let b = batch(&cfg, 3);
        let mut model = Model::new(cfg, 1).unwrap();
        let mut rng = StreamRng::from_seed(3).stream("aug");
        let out = model
            .forward_train(&b, Variant::Flats, None, false, &mut rng)
            .unwrap();
        assert_eq!(out.contrastive, 0.0);
        assert_eq!(out.joint, out.mae);
        // Nothing reached the projection.
        let d_w = out.grads.grad(model.proj_ids.weight);
        assert!(d_w.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn explicit_view_argument_must_match_the_variant() {
        let cfg = tiny_cfg();
        let b = batch(&cfg, 3);
        let rows = b.rows.clone();
        let mut model = Model::new(cfg, 1).unwrap();
        assert!(model
            .forward_train_with_view(&b, Variant::Focal, None, false, None)
            .is_err());
        assert!(model
            .forward_train_with_view(&b, Variant::Flats, None, false, Some(&rows))
            .is_err());
    }

    #[test]
    fn row_masks_only_combine_with_the_forecast_only_variant() {
        let cfg = tiny_cfg();
        let b = batch(&cfg, 3);
        let mask = vec![true; b.n_rows()];
        let mut model = Model::new(cfg, 1).unwrap();
        let mut rng = StreamRng::from_seed(3).stream("aug");
        let err = model
            .forward_train(&b, Variant::Focal, Some(&mask), false, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // An all-true mask with the forecast-only variant matches the
        // unmasked loss exactly.
        let masked = model
            .forward_train(&b, Variant::Flats, Some(&mask), false, &mut rng)
            .unwrap();
        let plain = model
            .forward_train(&b, Variant::Flats, None, false, &mut rng)
            .unwrap();
        assert_eq!(masked.mae, plain.mae);
    }

    #[test]
    fn unit_multiplier_collapses_focal_onto_plain_filtering() {
        let mut cfg = tiny_cfg();
        cfg.alpha = 1.0;
        let b = batch(&cfg, 5);
        let mut m_focal = Model::new(cfg.clone(), 11).unwrap();
        let mut m_nf = Model::new(cfg, 11).unwrap();
        let mut r1 = StreamRng::from_seed(7).stream("aug");
        let mut r2 = StreamRng::from_seed(7).stream("aug");
        let a = m_focal
            .forward_train(&b, Variant::Focal, None, true, &mut r1)
            .unwrap();
        let c = m_nf
            .forward_train(&b, Variant::FlatsNf, None, true, &mut r2)
            .unwrap();
        assert_eq!(a.joint, c.joint);
        assert_eq!(a.contrastive, c.contrastive);
        assert_eq!(
            a.grads.grad(m_focal.proj_ids.weight).data(),
            c.grads.grad(m_nf.proj_ids.weight).data()
        );
        assert_eq!(
            a.grads.grad(m_focal.graph_ids.node_embed).data(),
            c.grads.grad(m_nf.graph_ids.node_embed).data()
        );
        assert_eq!(m_focal.bn, m_nf.bn);
    }

    #[test]
    fn negative_filtering_changes_the_loss() {
        let cfg = tiny_cfg();
        let b = batch(&cfg, 5);
        let mut m_all = Model::new(cfg.clone(), 11).unwrap();
        let mut m_filtered = Model::new(cfg, 11).unwrap();
        let mut r1 = StreamRng::from_seed(7).stream("aug");
        let mut r2 = StreamRng::from_seed(7).stream("aug");
        let a = m_all
            .forward_train(&b, Variant::FlatsCl, None, false, &mut r1)
            .unwrap();
        let f = m_filtered
            .forward_train(&b, Variant::FlatsNf, None, false, &mut r2)
            .unwrap();
        // Both windows hold several rows, so filtering removes real
        // denominator mass and the losses must part ways.
        assert_ne!(a.contrastive, f.contrastive);
        assert_eq!(a.mae, f.mae);
    }

    #[test]
    fn running_statistics_follow_only_the_original_view() {
        let cfg = tiny_cfg();
        let b = batch(&cfg, 3);
        let mut m_flats = Model::new(cfg.clone(), 1).unwrap();
        let mut m_focal = Model::new(cfg, 1).unwrap();
        let frozen = m_flats.bn.clone();

        let mut rng = StreamRng::from_seed(9).stream("aug");
        m_flats
            .forward_train(&b, Variant::Flats, None, true, &mut rng)
            .unwrap();
        let mut rng = StreamRng::from_seed(9).stream("aug");
        m_focal
            .forward_train(&b, Variant::Focal, None, true, &mut rng)
            .unwrap();
        // The augmented pass must leave no trace in the running statistics:
        // both models saw the same original view, so they agree exactly.
        assert_ne!(m_flats.bn, frozen);
        assert_eq!(m_flats.bn, m_focal.bn);

        // And with updates declined, the statistics stay frozen.
        let mut m_frozen = Model::new(tiny_cfg(), 1).unwrap();
        let mut rng = StreamRng::from_seed(9).stream("aug");
        m_frozen
            .forward_train(&b, Variant::Focal, None, false, &mut rng)
            .unwrap();
        assert_eq!(m_frozen.bn, frozen);
    }

    #[test]
    fn masked_error_counts_only_marked_rows() {
        let pred = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 10.0, 10.0, 3.0, 5.0]).unwrap();
        let target = Tensor::from_vec(&[3, 2], vec![0.5, 2.0, 0.0, 0.0, 4.0, 5.0]).unwrap();
        let (loss, d) = masked_mae_loss(&pred, &target, &[true, false, true]).unwrap();
        // Rows 0 and 2 contribute |0.5| + |0| + |-1| + |0| over four cells.
        assert_abs_diff_eq!(loss, 1.5 / 4.0, epsilon = 1e-15);
        assert_eq!(d.row(1), &[0.0, 0.0]);
        assert_eq!(d.row(0), &[0.25, 0.0]); // tie gets a zero subgradient
        assert_eq!(d.row(2), &[-0.25, 0.0]);

        // Degenerate masks are rejected.
        assert!(masked_mae_loss(&pred, &target, &[false, false, false]).is_err());
        assert!(masked_mae_loss(&pred, &target, &[true, false]).is_err());
    }

    #[test]
    fn prediction_is_deterministic_and_leaves_the_model_alone() {
        let cfg = tiny_cfg();
        let b = batch(&cfg, 3);
        let model = Model::new(cfg, 1).unwrap();
        let before = model.bn.clone();
        let y1 = model.predict(&b).unwrap();
        let y2 = model.predict(&b).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_eq!(model.bn, before);
        assert_eq!(y1.shape(), [b.n_rows(), 2]);
    }

    /// True when some kept edge shares a node with another, i.e. the batch
    /// holds a subgraph whose Laplacian actually varies with the embedding
    /// tables. Two-node components have constant Laplacians (normalization
    /// cancels the single weight), which would make graph gradients
    /// structurally zero.
    fn has_branching_node(graphs: &BatchGraphs) -> bool {
        (0..graphs.n_keys()).any(|k| {
            let w = graphs.edge_weights(k);
            (0..w.dim(0)).any(|i| w.row(i).iter().filter(|&&v| v > 0.0).count() >= 2)
        })
    }

    /// Smallest |pre-activation| in the head's hidden layer — the seed
    /// screen keeps finite differences away from the ReLU kink.
    fn min_abs_head_hidden(model: &Model, h: &Tensor) -> f64 {
        let w1 = model.params.value(model.stfe_ids.head_w1);
        let b1 = model.params.value(model.stfe_ids.head_b1).data();
        let mut best = f64::INFINITY;
        for r in 0..h.dim(0) {
            for k in 0..w1.dim(0) {
                best = best.min((dot(w1.row(k), h.row(r)) + b1[k]).abs());
            }
        }
        best
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        // Search for a seed where no finite-difference probe sits near a
        // kink: the edge gate (raw scores), the head's ReLU, and the
        // absolute-error ties all get a margin, and at least one subgraph
        // must branch so the Laplacians genuinely depend on the tables.
        let cfg = tiny_cfg();
        let mut chosen = None;
        for seed in 0..40u64 {
            let b = batch(&cfg, seed);
            let mut model = Model::new(cfg.clone(), seed.wrapping_add(100)).unwrap();
            let graphs =
                BatchGraphs::build(&model.cfg.graph, &model.params, &model.graph_ids, &b).unwrap();
            if graphs.min_abs_off_diagonal_score() < 1e-3 || !has_branching_node(&graphs) {
                continue;
            }
            let mut aug_rng = StreamRng::from_seed(seed).stream("aug");
            let aug = augment(&b, &model.cfg.augment, &mut aug_rng).unwrap();
            let out = model
                .forward_train_with_view(&b, Variant::Focal, None, false, Some(&aug))
                .unwrap();
            let (h, _) = stfe_forward(
                &model.cfg.stfe,
                &model.params,
                &model.stfe_ids,
                &mut model.bn.clone(),
                false,
                &b.rows,
                &b,
                &graphs,
                Mode::Train,
            )
            .unwrap();
            if min_abs_head_hidden(&model, &h) < 1e-3 {
                continue;
            }
            let tie_margin = out
                .y_hat
                .data()
                .iter()
                .zip(b.targets.data())
                .map(|(&p, &y)| (p - y).abs())
                .fold(f64::INFINITY, f64::min);
            if tie_margin < 1e-3 {
                continue;
            }
            chosen = Some((b, model, aug, out));
            break;
        }
        let (b, model, aug, out) = chosen.expect("no screened seed found");

        let ids: Vec<ParamId> = model.params.ids().collect();
        let mut params = model.params.clone();
        // abs_floor sits above finite-difference roundoff (one ulp of an
        // O(1) loss over 2e-6 is ~1e-10): embedding directions that feed
        // only two-node subgraphs have exactly zero true gradient, and the
        // probe must read their noise as zero rather than as a mismatch.
        let check = CheckConfig {
            eps: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-5,
            max_entries_per_group: 12,
        };
        let mut pick = StreamRng::from_seed(424242).stream("pick");
        let report = finite_diff_check(
            &mut params,
            &out.grads,
            &ids,
            |ps| {
                let mut m = model.clone();
                m.params = ps.clone();
                m.forward_train_with_view(&b, Variant::Focal, None, false, Some(&aug))
                    .unwrap()
                    .joint
            },
            &check,
            &mut pick,
        )
        .unwrap();
        assert!(
            report.pass(),
            "joint-loss gradient check failed: {:#?}",
            report.failures()
        );
    }

    #[test]
    fn masked_gradients_also_match_finite_differences() {
        // The padded-row path: mask out one row and check the forecast-only
        // gradients against finite differences.
        let cfg = tiny_cfg();
        let b = batch(&cfg, 2);
        let mut model = Model::new(cfg, 77).unwrap();
        let mask = vec![true, true, false, true, true];
        let out = model
            .forward_train_with_view(&b, Variant::Flats, Some(&mask), false, None)
            .unwrap();
        let ids: Vec<ParamId> = model.params.ids().collect();
        let mut params = model.params.clone();
        let check = CheckConfig {
            eps: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-5,
            max_entries_per_group: 8,
        };
        let mut pick = StreamRng::from_seed(31).stream("pick");
        let mask_ref = &mask;
        let report = finite_diff_check(
            &mut params,
            &out.grads,
            &ids,
            |ps| {
                let mut m = model.clone();
                m.params = ps.clone();
                m.forward_train_with_view(&b, Variant::Flats, Some(mask_ref), false, None)
                    .unwrap()
                    .joint
            },
            &check,
            &mut pick,
        )
        .unwrap();
        assert!(
            report.pass(),
            "masked gradient check failed: {:#?}",
            report.failures()
        );
    }
}
