//! Learned time-aware adjacency.
//!
//! Each variable owns a learnable embedding row; each batch window carries a
//! reference slot whose time-of-day and day-of-week index two learnable
//! lookup tables. Concatenating node rows with the (broadcast) time rows and
//! taking the Gram product gives raw correlation scores; a sign gate plus
//! sigmoid turns scores into edge weights in (0.5, 1); the symmetric
//! normalized Laplacian of those weights feeds the graph convolutions.
//!
//! Everything here is differentiable by hand: [`BatchGraphs::backward`]
//! routes Laplacian-space gradients back into the embedding tables, and the
//! stage functions ([`sparsify_backward`], [`laplacian_backward`]) are
//! exposed for targeted testing.

use crate::flat::FlatBatch;
use crate::ops::sigmoid;
use crate::rng::StreamRng;
use crate::tensor::{GradSet, ParamId, ParamSet, Tensor};
use crate::{Error, Result};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

// Inherent f64 methods win under std; this import supplies exp/sqrt/etc.
// via libm when built without it.
#[allow(unused_imports)]
use num_traits::Float;

/// Sizes for the adjacency learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GraphConfig {
    /// Total number of variables the embedding table must cover.
    pub n_vars: usize,
    /// Slots per day, for the time-of-day index.
    pub steps_per_day: usize,
    /// Width of each node embedding row.
    pub node_dim: usize,
    /// Width of each time-table row (the joint time embedding is twice this).
    pub time_dim: usize,
}

impl GraphConfig {
    /// Default embedding widths for a dataset's variable count and calendar.
    pub fn new(n_vars: usize, steps_per_day: usize) -> Self {
        Self {
            n_vars,
            steps_per_day,
            node_dim: 20,
            time_dim: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vars == 0 {
            return Err(Error::Config("graph needs at least one variable".into()));
        }
        if self.steps_per_day == 0 {
            return Err(Error::Config("steps_per_day must be positive".into()));
        }
        if self.node_dim == 0 || self.time_dim == 0 {
            return Err(Error::Config(
                "embedding dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of a concatenated per-variable row: node part plus both time parts.
    pub fn concat_dim(&self) -> usize {
        self.node_dim + 2 * self.time_dim
    }
}

/// Handles to the three learnable tables inside a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct GraphParamIds {
    /// `n_vars x node_dim` node embeddings.
    pub node_embed: ParamId,
    /// `steps_per_day x time_dim` time-of-day rows.
    pub tod_table: ParamId,
    /// `7 x time_dim` day-of-week rows.
    pub dow_table: ParamId,
}

/// Registers the three tables, initialized from N(0, 0.1^2) — small enough
/// that initial raw scores straddle zero and the sign gate can learn
/// sparsity in both directions.
pub fn register_graph_params(
    cfg: &GraphConfig,
    params: &mut ParamSet,
    rng: &mut StreamRng,
) -> GraphParamIds {
    const INIT_STD: f64 = 0.1;
    GraphParamIds {
        node_embed: params.add(
            "graph.node_embed",
            Tensor::randn(&[cfg.n_vars, cfg.node_dim], INIT_STD, rng),
        ),
        tod_table: params.add(
            "graph.tod_table",
            Tensor::randn(&[cfg.steps_per_day, cfg.time_dim], INIT_STD, rng),
        ),
        dow_table: params.add(
            "graph.dow_table",
            Tensor::randn(&[7, cfg.time_dim], INIT_STD, rng),
        ),
    }
}

/// (time-of-day index, day-of-week index) for a slot.
#[inline]
pub fn time_indices(steps_per_day: usize, ref_time: usize) -> (usize, usize) {
    (ref_time % steps_per_day, (ref_time / steps_per_day) % 7)
}

/// Joint periodic embedding for a slot: the time-of-day row concatenated
/// with the day-of-week row (`2 * time_dim` entries).
pub fn time_embedding(
    cfg: &GraphConfig,
    params: &ParamSet,
    ids: &GraphParamIds,
    ref_time: usize,
) -> Vec<f64> {
    let (tod, dow) = time_indices(cfg.steps_per_day, ref_time);
    let mut e = Vec::with_capacity(2 * cfg.time_dim);
    e.extend_from_slice(params.value(ids.tod_table).row(tod));
    e.extend_from_slice(params.value(ids.dow_table).row(dow));
    e
}

/// Per-variable concatenated rows `[node_row | tod_row | dow_row]`,
/// shape `(n, concat_dim)`.
fn concat_rows(
    cfg: &GraphConfig,
    params: &ParamSet,
    ids: &GraphParamIds,
    variable_ids: &[usize],
    ref_time: usize,
) -> Result<Tensor> {
    let node = params.value(ids.node_embed);
    for &v in variable_ids {
        if v >= cfg.n_vars {
            return Err(Error::Shape(format!(
                "variable id {v} outside embedding table of {} rows",
                cfg.n_vars
            )));
        }
    }
    let time = time_embedding(cfg, params, ids, ref_time);
    let mut rows = Tensor::zeros(&[variable_ids.len(), cfg.concat_dim()]);
    for (r, &v) in variable_ids.iter().enumerate() {
        let out = rows.row_mut(r);
        out[..cfg.node_dim].copy_from_slice(node.row(v));
        out[cfg.node_dim..].copy_from_slice(&time);
    }
    Ok(rows)
}

/// Raw correlation scores for a set of variables at a slot: the Gram matrix
/// of their concatenated rows. Symmetric by construction.
pub fn build_adjacency(
    cfg: &GraphConfig,
    params: &ParamSet,
    ids: &GraphParamIds,
    variable_ids: &[usize],
    ref_time: usize,
) -> Result<Tensor> {
    Ok(gram(&concat_rows(
        cfg,
        params,
        ids,
        variable_ids,
        ref_time,
    )?))
}

fn gram(rows: &Tensor) -> Tensor {
    let n = rows.dim(0);
    let mut raw = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            raw.set2(i, j, crate::tensor::dot(rows.row(i), rows.row(j)));
        }
    }
    raw
}

/// Edge weights from raw scores: diagonal zeroed; a positive score becomes
/// `sigmoid(score)` (hence > 0.5), anything else is dropped to exactly zero.
pub fn sparsify(raw: &Tensor) -> Tensor {
    let n = raw.dim(0);
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let s = raw.at2(i, j);
            if i != j && s > 0.0 {
                w.set2(i, j, sigmoid(s));
            }
        }
    }
    w
}

/// Gradient of [`sparsify`]: the sigmoid derivative through kept entries,
/// exactly zero through dropped entries and the diagonal (hard gate, no
/// straight-through estimate).
pub fn sparsify_backward(raw: &Tensor, d_weights: &Tensor) -> Tensor {
    let n = raw.dim(0);
    let mut d_raw = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let s = raw.at2(i, j);
            if i != j && s > 0.0 {
                let w = sigmoid(s);
                d_raw.set2(i, j, d_weights.at2(i, j) * w * (1.0 - w));
            }
        }
    }
    d_raw
}

/// Checks the preconditions shared by the Laplacian forward and backward:
/// square, symmetric to 1e-9, nonnegative, zero diagonal.
fn check_weights(weights: &Tensor) -> Result<usize> {
    if weights.rank() != 2 || weights.dim(0) != weights.dim(1) {
        return Err(Error::Shape(format!(
            "edge weights must be square, got {:?}",
            weights.shape()
        )));
    }
    let n = weights.dim(0);
    for i in 0..n {
        if weights.at2(i, i) != 0.0 {
            return Err(Error::Shape(format!("nonzero self-edge at node {i}")));
        }
        for j in 0..n {
            let w = weights.at2(i, j);
            if w < 0.0 {
                return Err(Error::Shape(format!("negative edge weight at ({i}, {j})")));
            }
            if (w - weights.at2(j, i)).abs() > 1e-9 {
                return Err(Error::Shape(format!(
                    "edge weights asymmetric at ({i}, {j}): {w} vs {}",
                    weights.at2(j, i)
                )));
            }
        }
    }
    Ok(n)
}

/// Inverse square roots of the node degrees; exactly zero for isolated
/// nodes, which turns their Laplacian rows into identity rows.
fn inv_sqrt_degrees(weights: &Tensor, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let deg: f64 = weights.row(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

/// Symmetric normalized Laplacian `I - D^{-1/2} W D^{-1/2}`.
///
/// Isolated nodes get identity rows. The spectrum lies in `[0, 2]`, which
/// keeps the Chebyshev recursion bounded.
pub fn normalized_laplacian(weights: &Tensor) -> Result<Tensor> {
    let n = check_weights(weights)?;
    let s = inv_sqrt_degrees(weights, n);
    let mut lap = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let off = s[i] * weights.at2(i, j) * s[j];
            lap.set2(i, j, if i == j { 1.0 - off } else { -off });
        }
    }
    Ok(lap)
}

/// Gradient of [`normalized_laplacian`] w.r.t. the edge weights.
///
/// Two paths contribute: the weight appears directly in its own Laplacian
/// entry, and every weight in row `k` moves that node's degree and thereby
/// the whole row and column `k`. Isolated nodes contribute nothing through
/// the degree path (their scaling is pinned at zero).
pub fn laplacian_backward(weights: &Tensor, d_lap: &Tensor) -> Result<Tensor> {
    let n = check_weights(weights)?;
    if d_lap.shape() != weights.shape() {
        return Err(Error::Shape(format!(
            "laplacian gradient shape {:?} does not match weights {:?}",
            d_lap.shape(),
            weights.shape()
        )));
    }
    let s = inv_sqrt_degrees(weights, n);
    let mut d_w = Tensor::zeros(&[n, n]);
    // Direct path: d L[k][l] / d W[k][l] = -s_k s_l.
    for k in 0..n {
        for l in 0..n {
            d_w.set2(k, l, -s[k] * s[l] * d_lap.at2(k, l));
        }
    }
    // Degree path: d s_k picks up every Laplacian entry in row and column k;
    // d deg_k then spreads uniformly over row k of the weights.
    for k in 0..n {
        if s[k] == 0.0 {
            continue;
        }
        let mut d_s = 0.0;
        for j in 0..n {
            d_s += -weights.at2(k, j) * s[j] * (d_lap.at2(k, j) + d_lap.at2(j, k));
        }
        // s_k = deg_k^{-1/2}  =>  d deg_k = -0.5 s_k^3 d s_k.
        let d_deg = -0.5 * s[k] * s[k] * s[k] * d_s;
        for j in 0..n {
            *d_w.at2_mut(k, j) += d_deg;
        }
    }
    Ok(d_w)
}

/// Sparsified adjacency over every variable at one slot, for export.
pub fn snapshot_adjacency(
    cfg: &GraphConfig,
    params: &ParamSet,
    ids: &GraphParamIds,
    ref_time: usize,
) -> Result<Tensor> {
    let all: Vec<usize> = (0..cfg.n_vars).collect();
    Ok(sparsify(&build_adjacency(
        cfg, params, ids, &all, ref_time,
    )?))
}

/// One memoization key: a window's variable set and its calendar position.
/// Windows whose reference slots are congruent modulo a week share a key.
#[derive(Debug, Clone, PartialEq, Eq)]
struct SubgraphKey {
    variable_ids: Vec<usize>,
    tod: usize,
    dow: usize,
}

/// All distinct adjacencies a batch needs, built once and shared by every
/// window with the same key. Intermediate stages are retained so the
/// backward pass can replay them without touching the parameters.
#[derive(Debug, Clone)]
pub struct BatchGraphs {
    keys: Vec<SubgraphKey>,
    /// Per key: a representative reference slot (used only for rebuilds).
    embeds: Vec<Tensor>,
    raws: Vec<Tensor>,
    weights: Vec<Tensor>,
    laplacians: Vec<Tensor>,
    /// Per window: index into the key-parallel vectors.
    subgraph_to_key: Vec<usize>,
}

impl BatchGraphs {
    /// Builds (and memoizes) the adjacency pipeline for every window of a
    /// batch.
    pub fn build(
        cfg: &GraphConfig,
        params: &ParamSet,
        ids: &GraphParamIds,
        batch: &FlatBatch,
    ) -> Result<Self> {
        let mut out = Self {
            keys: Vec::new(),
            embeds: Vec::new(),
            raws: Vec::new(),
            weights: Vec::new(),
            laplacians: Vec::new(),
            subgraph_to_key: Vec::with_capacity(batch.n_subgraphs()),
        };
        for b in 0..batch.n_subgraphs() {
            let vars = batch.subgraph_variables(b);
            let (tod, dow) = time_indices(cfg.steps_per_day, batch.ref_time[b]);
            let key = SubgraphKey {
                variable_ids: vars.to_vec(),
                tod,
                dow,
            };
            // Batches hold few distinct keys; a scan beats hashing here and
            // keeps iteration order deterministic.
            let k = match out.keys.iter().position(|k| *k == key) {
                Some(k) => k,
                None => {
                    let embed = concat_rows(cfg, params, ids, vars, batch.ref_time[b])?;
                    let raw = gram(&embed);
                    let weights = sparsify(&raw);
                    let lap = normalized_laplacian(&weights)?;
                    out.keys.push(key);
                    out.embeds.push(embed);
                    out.raws.push(raw);
                    out.weights.push(weights);
                    out.laplacians.push(lap);
                    out.keys.len() - 1
                }
            };
            out.subgraph_to_key.push(k);
        }
        Ok(out)
    }

    pub fn n_keys(&self) -> usize {
        self.keys.len()
    }

    /// Key index of window `b`.
    pub fn key_of(&self, subgraph: usize) -> usize {
        self.subgraph_to_key[subgraph]
    }

    pub fn laplacian(&self, key: usize) -> &Tensor {
        &self.laplacians[key]
    }

    pub fn edge_weights(&self, key: usize) -> &Tensor {
        &self.weights[key]
    }

    /// Zeroed gradient buffers, one per distinct Laplacian, for callers to
    /// accumulate into before [`Self::backward`].
    pub fn laplacian_grad_buffers(&self) -> Vec<Tensor> {
        self.laplacians
            .iter()
            .map(|l| Tensor::zeros(l.shape()))
            .collect()
    }

    /// Smallest `|raw score|` over all off-diagonal entries of all keys.
    ///
    /// Gradient checks perturb parameters by a finite step; a raw score at
    /// the sign gate's edge would flip discretely and poison the comparison,
    /// so tests screen their inputs with this.
    pub fn min_abs_off_diagonal_score(&self) -> f64 {
        let mut best = f64::INFINITY;
        for raw in &self.raws {
            let n = raw.dim(0);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        best = best.min(raw.at2(i, j).abs());
                    }
                }
            }
        }
        best
    }

    /// Routes per-key Laplacian gradients back into the embedding tables.
    ///
    /// `d_laplacians` must be key-parallel (see [`Self::laplacian_grad_buffers`]).
    /// Windows sharing a key must have had their contributions summed into
    /// the one buffer — which falls out naturally, since the shared
    /// Laplacian is one value used several times.
    pub fn backward(
        &self,
        cfg: &GraphConfig,
        ids: &GraphParamIds,
        d_laplacians: &[Tensor],
        grads: &mut GradSet,
    ) -> Result<()> {
        if d_laplacians.len() != self.n_keys() {
            return Err(Error::Shape(format!(
                "{} laplacian gradients for {} distinct subgraphs",
                d_laplacians.len(),
                self.n_keys()
            )));
        }
        for (k, d_lap) in d_laplacians.iter().enumerate() {
            let d_w = laplacian_backward(&self.weights[k], d_lap)?;
            let d_raw = sparsify_backward(&self.raws[k], &d_w);
            // raw = rows · rows^T  =>  d rows = (d_raw + d_raw^T) · rows.
            let embed = &self.embeds[k];
            let n = embed.dim(0);
            let width = embed.dim(1);
            let mut d_rows = Tensor::zeros(&[n, width]);
            for i in 0..n {
                for j in 0..n {
                    let g = d_raw.at2(i, j) + d_raw.at2(j, i);
                    if g != 0.0 {
                        crate::tensor::axpy(d_rows.row_mut(i), g, embed.row(j));
                    }
                }
            }
            // Scatter the concatenation: node part to the variable's row,
            // time parts to the indexed table rows (summed over variables,
            // since the same time rows were broadcast to each).
            let key = &self.keys[k];
            let d_node = grads.grad_mut(ids.node_embed);
            for (r, &v) in key.variable_ids.iter().enumerate() {
                crate::tensor::axpy(d_node.row_mut(v), 1.0, &d_rows.row(r)[..cfg.node_dim]);
            }
            let d_tod = grads.grad_mut(ids.tod_table);
            for r in 0..n {
                crate::tensor::axpy(
                    d_tod.row_mut(key.tod),
                    1.0,
                    &d_rows.row(r)[cfg.node_dim..cfg.node_dim + cfg.time_dim],
                );
            }
            let d_dow = grads.grad_mut(ids.dow_table);
            for r in 0..n {
                crate::tensor::axpy(
                    d_dow.row_mut(key.dow),
                    1.0,
                    &d_rows.row(r)[cfg.node_dim + cfg.time_dim..],
                );
            }
        }
        Ok(())
    }

    /// Debug description of the key set, e.g. for `--dump-batch`.
    pub fn describe_keys(&self) -> Vec<String> {
        self.keys
            .iter()
            .map(|k| format!("vars {:?} tod {} dow {}", k.variable_ids, k.tod, k.dow))
            .collect()
    }
}
