//! Contrastive regularization over flat batches.
//!
//! A second "view" of each batch is produced by augmenting the input rows;
//! both views run through the same encoder, project to a latent space, and
//! form a similarity matrix. Each row's augmented self is its positive pair;
//! negatives are drawn from the rest of the batch, except that rows sharing
//! a window (subgraph) can be filtered out of each other's denominators —
//! co-observed variables are usually correlated, so treating them as
//! negatives would push apart representations that belong together.
//!
//! Rows flagged as late arrivals can be assigned a reduced temperature,
//! which sharpens their softmax and so concentrates the training signal on
//! exactly the rows with the least history behind them.

use crate::flat::FlatBatch;
use crate::rng::StreamRng;
use crate::tensor::{axpy, dot, GradSet, ParamId, ParamSet, Tensor};
use crate::{Error, Result};
use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;

/// How the augmented view is generated from the original rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    /// Independent Gaussian noise per entry.
    Jitter,
    /// Convex blend of each row with a random row from its own window.
    Mixup,
    /// A bounded random-walk drift followed by amplitude quantization.
    Hybrid,
}

/// Augmentation settings. Noise amplitudes are expressed as fractions of
/// each row's own standard deviation, so flat rows stay flat and busy rows
/// get proportionate perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub method: AugmentMethod,
    /// Noise standard deviation as a fraction of the row std.
    pub jitter_std: f64,
    /// Peak drift amplitude as a fraction of the row std.
    pub drift_max: f64,
    /// Number of uniform quantization levels spanning each row's range.
    pub quant_levels: usize,
    /// Beta(b, b) concentration for mixup blend weights.
    pub mixup_beta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            method: AugmentMethod::Hybrid,
            jitter_std: 0.1,
            drift_max: 0.1,
            quant_levels: 20,
            mixup_beta: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quant_levels < 2 {
            return Err(Error::Config(format!(
                "quant_levels must be at least 2, got {}",
                self.quant_levels
            )));
        }
        if !(self.jitter_std >= 0.0) || !(self.drift_max >= 0.0) {
            return Err(Error::Config(
                "jitter_std and drift_max must be non-negative".into(),
            ));
        }
        if !(self.mixup_beta > 0.0) {
            return Err(Error::Config(format!(
                "mixup_beta must be positive, got {}",
                self.mixup_beta
            )));
        }
        Ok(())
    }
}

/// Population standard deviation of one row.
fn row_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Snaps each value to the nearest of `levels` uniform levels spanning the
/// row's own `[min, max]`. A constant row has a collapsed range and is left
/// untouched.
pub fn quantize_row(row: &mut [f64], levels: usize) {
    debug_assert!(levels >= 2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in row.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return;
    }
    let step = (hi - lo) / (levels - 1) as f64;
    for v in row.iter_mut() {
        let k = ((*v - lo) / step).round();
        *v = lo + k * step;
    }
}

/// Adds a cumulative random walk to the row, rescaled so the walk's largest
/// absolute value is exactly `max_abs`.
pub fn drift_row(row: &mut [f64], max_abs: f64, rng: &mut StreamRng) {
    let mut walk = Vec::with_capacity(row.len());
    let mut acc = 0.0;
    for _ in 0..row.len() {
        acc += rng.standard_normal();
        walk.push(acc);
    }
    let peak = walk.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
    if peak == 0.0 {
        return;
    }
    let scale = max_abs / peak;
    for (v, w) in row.iter_mut().zip(&walk) {
        *v += scale * w;
    }
}

/// Generates the augmented view of a batch's input rows.
///
/// The result has the batch's row shape; all metadata (subgraph membership,
/// variable ids, flags, targets) continues to describe the augmented rows,
/// which is what lets both views share one graph and one flat structure.
/// Deterministic for a given generator state.
pub fn augment(batch: &FlatBatch, cfg: &AugmentConfig, rng: &mut StreamRng) -> Result<Tensor> {
    cfg.validate()?;
    if !batch.rows.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("augmentation input rows".into()));
    }
    let mut out = batch.rows.clone();
    match cfg.method {
        AugmentMethod::Jitter => {
            for r in 0..out.dim(0) {
                let row = out.row_mut(r);
                let std = cfg.jitter_std * row_std(row);
                for v in row.iter_mut() {
                    *v += std * rng.standard_normal();
                }
            }
        }
        AugmentMethod::Hybrid => {
            for r in 0..out.dim(0) {
                let row = out.row_mut(r);
                let amp = cfg.drift_max * row_std(row);
                drift_row(row, amp, rng);
                quantize_row(row, cfg.quant_levels);
            }
        }
        AugmentMethod::Mixup => {
            for b in 0..batch.n_subgraphs() {
                let range = batch.subgraph_rows(b);
                for r in range.clone() {
                    let partner = range.start + rng.index(range.len());
                    let lambda = rng.beta(cfg.mixup_beta, cfg.mixup_beta)?;
                    let src = batch.rows.row(partner).to_vec();
                    let row = out.row_mut(r);
                    for (v, &other) in row.iter_mut().zip(&src) {
                        *v = lambda * *v + (1.0 - lambda) * other;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Handles for the latent projection's learnables.
#[derive(Debug, Clone, Copy)]
pub struct ProjParamIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Registers the affine projection (`proj.weight`, `proj.bias`) mapping
/// encoder features (width `c_in`) to the latent space (width `proj_dim`).
pub fn register_projection(
    c_in: usize,
    proj_dim: usize,
    params: &mut ParamSet,
    rng: &mut StreamRng,
) -> ProjParamIds {
    let std = 1.0 / (c_in as f64).sqrt();
    ProjParamIds {
        weight: params.add("proj.weight", Tensor::randn(&[proj_dim, c_in], std, rng)),
        bias: params.add("proj.bias", Tensor::zeros(&[proj_dim])),
    }
}

/// Projects feature rows into the latent space: `z = W h + b` per row.
pub fn project(params: &ParamSet, ids: &ProjParamIds, h: &Tensor) -> Result<Tensor> {
    let w = params.value(ids.weight);
    let b = params.value(ids.bias).data();
    let (rows, c_in) = (h.dim(0), h.dim(1));
    if w.dim(1) != c_in {
        return Err(Error::Shape(format!(
            "projection expects width {}, features have {c_in}",
            w.dim(1)
        )));
    }
    let d_z = w.dim(0);
    let mut z = Tensor::zeros(&[rows, d_z]);
    for r in 0..rows {
        for k in 0..d_z {
            z.set2(r, k, dot(w.row(k), h.row(r)) + b[k]);
        }
    }
    Ok(z)
}

/// Backward pass of [`project`]: accumulates weight/bias gradients and
/// returns the gradient on the feature rows.
pub fn project_backward(
    params: &ParamSet,
    ids: &ProjParamIds,
    h: &Tensor,
    d_z: &Tensor,
    grads: &mut GradSet,
) -> Result<Tensor> {
    let w = params.value(ids.weight);
    let (rows, d_out) = (h.dim(0), w.dim(0));
    if d_z.shape() != [rows, d_out] {
        return Err(Error::Shape(format!(
            "latent gradient {:?}, expected [{rows}, {d_out}]",
            d_z.shape()
        )));
    }
    let mut d_h = Tensor::zeros(h.shape());
    {
        let d_w = grads.grad_mut(ids.weight);
        for r in 0..rows {
            for k in 0..d_out {
                let g = d_z.at2(r, k);
                if g != 0.0 {
                    axpy(d_w.row_mut(k), g, h.row(r));
                }
            }
        }
    }
    {
        let d_b = grads.grad_mut(ids.bias).data_mut();
        for r in 0..rows {
            axpy(d_b, 1.0, d_z.row(r));
        }
    }
    for r in 0..rows {
        for k in 0..d_out {
            let g = d_z.at2(r, k);
            if g != 0.0 {
                axpy(d_h.row_mut(r), g, w.row(k));
            }
        }
    }
    Ok(d_h)
}

/// Similarity used between latent rows. Dot product is the default; the
/// cosine option rescales every row to unit length first, which makes the
/// similarity scale-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    Cosine,
}

/// Norm floor below which a row is treated as having constant length, so
/// zero rows neither divide by zero nor produce infinite gradients.
const NORM_FLOOR: f64 = 1e-12;

/// Rescales each row to unit L2 norm (rows shorter than the floor are
/// divided by the floor instead). Returns the scaled rows and the
/// per-row norms needed by the backward pass.
pub fn normalize_rows(z: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.dim(0));
    for r in 0..z.dim(0) {
        let n = dot(z.row(r), z.row(r)).sqrt().max(NORM_FLOOR);
        for v in out.row_mut(r) {
            *v /= n;
        }
        norms.push(n);
    }
    (out, norms)
}

/// Backward pass of [`normalize_rows`].
pub fn normalize_rows_backward(z: &Tensor, norms: &[f64], d_out: &Tensor) -> Tensor {
    let mut d_z = Tensor::zeros(z.shape());
    for r in 0..z.dim(0) {
        let n = norms[r];
        let raw = z.row(r);
        let dn = d_out.row(r);
        let true_norm = dot(raw, raw).sqrt();
        if true_norm > NORM_FLOOR {
            // d/dz of z/|z|: remove the component of the upstream gradient
            // along the row itself, then undo the scaling.
            let along = dot(dn, raw) / (n * n);
            let dst = d_z.row_mut(r);
            for i in 0..dst.len() {
                dst[i] = (dn[i] - along * raw[i]) / n;
            }
        } else {
            // The floor is active: the division is by a constant.
            let dst = d_z.row_mut(r);
            for i in 0..dst.len() {
                dst[i] = dn[i] / n;
            }
        }
    }
    d_z
}

/// Per-row softmax temperatures: late arrivals get `alpha * tau`, settled
/// rows get `tau`. `alpha = 1` collapses to a uniform temperature (used by
/// the ablation that keeps filtering but drops the focal weighting).
pub fn focal_temperatures(expanding: &[bool], tau: f64, alpha: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!(
            "focal factor must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(expanding
        .iter()
        .map(|&e| if e { alpha * tau } else { tau })
        .collect())
}

/// Latent views and their similarity matrix, ready for the loss.
#[derive(Debug, Clone)]
pub struct ContrastiveBundle {
    /// Projections of the original view, `(rows, d_z)`.
    pub z: Tensor,
    /// Projections of the augmented view, same shape.
    pub z_aug: Tensor,
    /// `s[i][j] = dot(z[i], z_aug[j])`.
    pub s: Tensor,
    /// Per-row temperature.
    pub tau_vec: Vec<f64>,
}

impl ContrastiveBundle {
    /// Pairs the two views and computes their similarity matrix.
    pub fn new(z: Tensor, z_aug: Tensor, tau_vec: Vec<f64>) -> Result<Self> {
        if z.shape() != z_aug.shape() {
            return Err(Error::Shape(format!(
                "views disagree: {:?} vs {:?}",
                z.shape(),
                z_aug.shape()
            )));
        }
        let rows = z.dim(0);
        if tau_vec.len() != rows {
            return Err(Error::Shape(format!(
                "{} temperatures for {rows} rows",
                tau_vec.len()
            )));
        }
        if tau_vec.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        let mut s = Tensor::zeros(&[rows, rows]);
        for i in 0..rows {
            for j in 0..rows {
                s.set2(i, j, dot(z.row(i), z_aug.row(j)));
            }
        }
        if !s.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("similarity matrix".into()));
        }
        Ok(ContrastiveBundle {
            z,
            z_aug,
            s,
            tau_vec,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.z.dim(0)
    }
}

/// Which rows may serve as negatives in a row's denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSet {
    /// Every other row of the batch.
    All,
    /// Only rows from other windows; a row's window-mates are excluded.
    OutsideSubgraph,
}

/// Contrastive loss over a bundle, with per-row temperatures and optional
/// same-window negative filtering.
///
/// Row `i`'s denominator runs over `D_i = {i} ∪ {allowed negatives}` — the
/// positive pair always stays in, so the softmax is well-formed even when
/// filtering removes every other row. Each row contributes
/// `-log( exp(s_ii/t_i) / sum_{j in D_i} exp(s_ij/t_i) )`, stabilized by
/// subtracting the row's maximum scaled similarity before exponentiation;
/// the result is the mean over rows.
///
/// Returns the loss and its gradients with respect to both latent views.
/// Excluded pairs contribute nothing and receive exactly zero gradient.
pub fn focal_contrastive_loss(
    bundle: &ContrastiveBundle,
    subgraph_id: &[usize],
    negatives: NegativeSet,
) -> Result<(f64, Tensor, Tensor)> {
    let rows = bundle.n_rows();
    if subgraph_id.len() != rows {
        return Err(Error::Shape(format!(
            "{} subgraph ids for {rows} rows",
            subgraph_id.len()
        )));
    }
    let mut loss = 0.0;
    let mut d_z = Tensor::zeros(bundle.z.shape());
    let mut d_z_aug = Tensor::zeros(bundle.z_aug.shape());
    let inv_rows = 1.0 / rows as f64;
    let mut active: Vec<usize> = Vec::with_capacity(rows);

    for i in 0..rows {
        active.clear();
        for j in 0..rows {
            let admit = j == i
                || match negatives {
                    NegativeSet::All => true,
                    NegativeSet::OutsideSubgraph => subgraph_id[j] != subgraph_id[i],
                };
            if admit {
                active.push(j);
            }
        }
        let t = bundle.tau_vec[i];
        let m = active
            .iter()
            .map(|&j| bundle.s.at2(i, j) / t)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &j in &active {
            denom += (bundle.s.at2(i, j) / t - m).exp();
        }
        let pos = bundle.s.at2(i, i) / t - m;
        loss += (-pos + denom.ln()) * inv_rows;

        // d loss / d s_ij = (p_ij - [j == i]) / (rows * t) on the active set.
        for &j in &active {
            let p = (bundle.s.at2(i, j) / t - m).exp() / denom;
            let indicator = if j == i { 1.0 } else { 0.0 };
            let g = (p - indicator) * inv_rows / t;
            if g != 0.0 {
                axpy(d_z.row_mut(i), g, bundle.z_aug.row(j));
                axpy(d_z_aug.row_mut(j), g, bundle.z.row(i));
            }
        }
    }
    Ok((loss, d_z, d_z_aug))
}

/// Mean absolute error over all forecast cells, with its subgradient
/// (zero exactly at ties).
pub fn mae_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "forecast {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel() as f64;
    let mut total = 0.0;
    let mut d_pred = Tensor::zeros(pred.shape());
    for (k, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        let diff = p - y;
        total += diff.abs();
        d_pred.data_mut()[k] = if diff > 0.0 {
            1.0 / n
        } else if diff < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((total / n, d_pred))
}

/// Training objective: contrastive term plus mean absolute forecast error.
pub fn joint_loss(pred: &Tensor, target: &Tensor, l_cl: f64) -> Result<f64> {
    let (mae, _) = mae_loss(pred, target)?;
    Ok(l_cl + mae)
}
