//! Spatio-temporal encoder over flat batches.
//!
//! Input rows are left-padded with zeros to the stack's receptive field,
//! lifted to `C` channels by a per-channel affine embedding, and pushed
//! through `M` blocks of `L` layers. Each layer runs four stages in order:
//!
//! 1. a gated dilated convolution `U = tanh(conv_f(H)) * sigmoid(conv_g(H))`
//!    (separate kernels per branch; dilation `q^(l-1)` restarts each block),
//! 2. batch normalization of the cropped residual `H + U`,
//! 3. a skip update `H_out <- W_s H_out + b_s + U[.., last]` collecting each
//!    layer's final time step into a per-row summary (`H_out` starts at 0),
//! 4. a Chebyshev graph convolution of `H` within each window's subgraph.
//!
//! Dilations shrink the temporal axis to exactly one step by the end of the
//! stack; the forecast features are the accumulated skip summary, one
//! `C`-vector per flat row. A two-stage 1x1 head maps features to the
//! forecast horizon.
//!
//! The backward pass is written by hand against the cached forward
//! intermediates and is validated end to end by finite differences.

use crate::flat::FlatBatch;
use crate::graph::BatchGraphs;
use crate::ops::{conv_backward_input, conv_backward_kernel, conv_forward, sigmoid};
use crate::rng::StreamRng;
use crate::tensor::{axpy, dot, GradSet, ParamId, ParamSet, Tensor};
use crate::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

// Inherent f64 methods win under std; this import supplies exp/sqrt/etc.
// via libm when built without it.
#[allow(unused_imports)]
use num_traits::Float;

/// Architecture sizes for the encoder and its forecast head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StfeConfig {
    /// Channel width `C` carried through every stage.
    pub channels: usize,
    /// Number of blocks `M`.
    pub blocks: usize,
    /// Layers per block `L`.
    pub layers_per_block: usize,
    /// Convolution taps `k`.
    pub kernel: usize,
    /// Dilation growth `q`: layer `l` of a block dilates by `q^(l-1)`.
    pub dilation_base: usize,
    /// Chebyshev expansion order `J` (number of terms).
    pub cheb_order: usize,
    /// Input window length.
    pub history: usize,
    /// Forecast length produced by the head.
    pub horizon: usize,
    /// Hidden width of the head's first stage.
    pub head_hidden: usize,
    /// Momentum for batch-norm running statistics.
    pub bn_momentum: f64,
    /// Numerical floor inside batch-norm denominators.
    pub bn_eps: f64,
}

impl StfeConfig {
    /// Default architecture for a given window/horizon pair.
    pub fn new(history: usize, horizon: usize) -> Self {
        Self {
            channels: 32,
            blocks: 4,
            layers_per_block: 2,
            kernel: 2,
            dilation_base: 2,
            cheb_order: 3,
            history,
            horizon,
            head_hidden: 32,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Dilation of layer `l` (0-based) within its block.
    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_base.pow(layer as u32)
    }

    /// Steps of input a single pass through the stack consumes, plus the one
    /// that survives: `1 + (k-1) * M * (1 + q + ... + q^(L-1))`.
    pub fn receptive_field(&self) -> usize {
        let per_block: usize = (0..self.layers_per_block).map(|l| self.dilation(l)).sum();
        1 + (self.kernel - 1) * self.blocks * per_block
    }

    /// Zeros prepended to each input row so the stack ends with at least one
    /// time step.
    pub fn padding(&self) -> usize {
        self.receptive_field().saturating_sub(self.history)
    }

    pub fn padded_len(&self) -> usize {
        self.history + self.padding()
    }

    /// Temporal length remaining after the full stack.
    pub fn final_len(&self) -> usize {
        self.padded_len() - (self.receptive_field() - 1)
    }

    /// Walks the temporal ledger from an explicit starting length, returning
    /// the length after each layer. Errs, naming the block and layer, as
    /// soon as a convolution would be asked for more steps than remain.
    pub fn temporal_ledger(&self, start_len: usize) -> Result<Vec<usize>> {
        let mut t = start_len;
        let mut lens = Vec::with_capacity(self.blocks * self.layers_per_block);
        for m in 0..self.blocks {
            for l in 0..self.layers_per_block {
                let need = (self.kernel - 1) * self.dilation(l) + 1;
                if t < need {
                    return Err(Error::Shape(format!(
                        "temporal underflow at block {} layer {}: {t} steps left, convolution needs {need}",
                        m + 1,
                        l + 1
                    )));
                }
                t -= need - 1;
                lens.push(t);
            }
        }
        Ok(lens)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("layers_per_block", self.layers_per_block),
            ("kernel", self.kernel),
            ("dilation_base", self.dilation_base),
            ("cheb_order", self.cheb_order),
            ("history", self.history),
            ("horizon", self.horizon),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must lie in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config(format!(
                "bn_eps must be positive, got {}",
                self.bn_eps
            )));
        }
        // Padding guarantees this ledger succeeds; run it anyway so a
        // hand-built config cannot smuggle in an inconsistent geometry.
        let lens = self.temporal_ledger(self.padded_len())?;
        debug_assert_eq!(lens.last().copied(), Some(self.final_len()));
        Ok(())
    }
}

/// Handles for one layer's learnables.
#[derive(Debug, Clone)]
pub struct LayerParamIds {
    pub filter: ParamId,
    pub gate: ParamId,
    pub bn_scale: ParamId,
    pub bn_shift: ParamId,
    pub skip_weight: ParamId,
    pub skip_bias: ParamId,
    /// Chebyshev coefficient matrices, one per expansion term.
    pub cheb: Vec<ParamId>,
}

/// Handles for every encoder and head learnable inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct StfeParamIds {
    pub input_weight: ParamId,
    pub input_bias: ParamId,
    /// Row-major over (block, layer).
    pub layers: Vec<LayerParamIds>,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
}

/// Registers all encoder parameters under canonical dotted names
/// (`stfe.block2.layer1.filter`, `head.w1`, ...; block/layer are 1-based).
///
/// Matrix-shaped weights start from scaled normals (1/sqrt(fan-in)); batch
/// norm starts at identity; biases start at zero.
pub fn register_stfe_params(
    cfg: &StfeConfig,
    params: &mut ParamSet,
    rng: &mut StreamRng,
) -> StfeParamIds {
    let c = cfg.channels;
    let k = cfg.kernel;
    let conv_std = 1.0 / ((c * k) as f64).sqrt();
    let mat_std = 1.0 / (c as f64).sqrt();
    let cheb_std = 1.0 / ((c * cfg.cheb_order) as f64).sqrt();

    let input_weight = params.add("stfe.input_embed.weight", Tensor::randn(&[c], 1.0, rng));
    let input_bias = params.add("stfe.input_embed.bias", Tensor::zeros(&[c]));

    let mut layers = Vec::with_capacity(cfg.blocks * cfg.layers_per_block);
    for m in 1..=cfg.blocks {
        for l in 1..=cfg.layers_per_block {
            let base = format!("stfe.block{m}.layer{l}");
            let cheb = (1..=cfg.cheb_order)
                .map(|j| {
                    params.add(
                        &format!("{base}.cheb{j}"),
                        Tensor::randn(&[c, c], cheb_std, rng),
                    )
                })
                .collect();
            layers.push(LayerParamIds {
                filter: params.add(
                    &format!("{base}.filter"),
                    Tensor::randn(&[c, c, k], conv_std, rng),
                ),
                gate: params.add(
                    &format!("{base}.gate"),
                    Tensor::randn(&[c, c, k], conv_std, rng),
                ),
                bn_scale: params.add(&format!("{base}.bn_scale"), Tensor::filled(&[c], 1.0)),
                bn_shift: params.add(&format!("{base}.bn_shift"), Tensor::zeros(&[c])),
                skip_weight: params.add(
                    &format!("{base}.skip.weight"),
                    Tensor::randn(&[c, c], mat_std, rng),
                ),
                skip_bias: params.add(&format!("{base}.skip.bias"), Tensor::zeros(&[c])),
                cheb,
            });
        }
    }

    let head_w1 = params.add(
        "head.w1",
        Tensor::randn(&[cfg.head_hidden, c], mat_std, rng),
    );
    let head_b1 = params.add("head.b1", Tensor::zeros(&[cfg.head_hidden]));
    let head_w2 = params.add(
        "head.w2",
        Tensor::randn(
            &[cfg.horizon, cfg.head_hidden],
            1.0 / (cfg.head_hidden as f64).sqrt(),
            rng,
        ),
    );
    let head_b2 = params.add("head.b2", Tensor::zeros(&[cfg.horizon]));

    StfeParamIds {
        input_weight,
        input_bias,
        layers,
        head_w1,
        head_b1,
        head_w2,
        head_b2,
    }
}

/// Running batch-norm statistics for one layer. State, not a learnable:
/// the optimizer never touches it, but checkpoints must carry it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running statistics for the whole stack, row-major over (block, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub layers: Vec<BnLayerState>,
}

impl BnState {
    /// Fresh state: mean 0, variance 1 per channel.
    pub fn new(cfg: &StfeConfig) -> Self {
        Self {
            layers: (0..cfg.blocks * cfg.layers_per_block)
                .map(|_| BnLayerState {
                    mean: vec![0.0; cfg.channels],
                    var: vec![1.0; cfg.channels],
                })
                .collect(),
        }
    }
}

/// Whether a forward pass normalizes with batch statistics (and can back-
/// propagate) or with frozen running statistics (pure per-row inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics captured by a training-mode normalization.
#[derive(Debug, Clone)]
struct BnCache {
    inv_std: Vec<f64>,
    xhat: Tensor,
}

/// Everything one layer's backward pass needs.
#[derive(Debug, Clone)]
struct LayerCache {
    t_in: usize,
    t_out: usize,
    dilation: usize,
    /// Input slab `(rows, C, t_in)` the convolutions read.
    h_in: Tensor,
    /// Post-activation branches, each `(rows, C, t_out)`.
    tanh_f: Tensor,
    sig_g: Tensor,
    /// Present only in training mode.
    bn: Option<BnCache>,
    /// Skip summary before this layer's update.
    h_out_prev: Tensor,
    /// Chebyshev terms, one slab per expansion order.
    cheb_terms: Vec<Tensor>,
}

/// Forward intermediates for [`stfe_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    /// Zero-padded inputs, `(rows, padded_len)`.
    x_padded: Tensor,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// `(n, k) x (k, m) -> (n, m)`.
fn mat_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
    debug_assert_eq!(k, b.dim(0));
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (kk, &av) in ar.iter().enumerate().take(k) {
            if av != 0.0 {
                axpy(or, av, b.row(kk));
            }
        }
    }
    out
}

/// `(n, m) x (k, m)^T -> (n, k)`.
fn mat_mul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.dim(0), b.dim(0));
    let mut out = Tensor::zeros(&[n, k]);
    for i in 0..n {
        for j in 0..k {
            out.set2(i, j, dot(a.row(i), b.row(j)));
        }
    }
    out
}

/// `out += scale * a^T b` for `a: (n, k)`, `b: (n, m)`, `out: (k, m)`.
fn mat_acc_tn(scale: f64, a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k) = (a.dim(0), a.dim(1));
    debug_assert_eq!(out.shape(), &[k, b.dim(1)]);
    for i in 0..n {
        let ar = a.row(i);
        for kk in 0..k {
            let s = scale * ar[kk];
            if s != 0.0 {
                axpy(out.row_mut(kk), s, b.row(i));
            }
        }
    }
}

/// `out += scale * a b^T` for row-aligned `a, b: (n, C)`, `out: (n, n)`.
fn mat_acc_outer(scale: f64, a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let n = a.dim(0);
    for i in 0..n {
        for j in 0..n {
            *out.at2_mut(i, j) += scale * dot(a.row(i), b.row(j));
        }
    }
}

/// Chebyshev basis slices of the graph operator applied to `x`:
/// `[x, L x, 2 L (L x) - x, ...]`, `j_max` terms.
pub fn cheb_terms(lap: &Tensor, x: &Tensor, j_max: usize) -> Vec<Tensor> {
    let mut terms = Vec::with_capacity(j_max);
    terms.push(x.clone());
    if j_max >= 2 {
        terms.push(mat_mul(lap, x));
    }
    for j in 2..j_max {
        let mut next = mat_mul(lap, &terms[j - 1]);
        for v in next.data_mut() {
            *v *= 2.0;
        }
        next.add_scaled(&terms[j - 2], -1.0);
        terms.push(next);
    }
    terms
}

/// Chebyshev graph convolution of node features `x: (n, C)`:
/// the sum of each basis term times its coefficient matrix.
pub fn cheb_apply(lap: &Tensor, x: &Tensor, thetas: &[&Tensor]) -> Tensor {
    let terms = cheb_terms(lap, x, thetas.len());
    let mut out = Tensor::zeros(&[x.dim(0), thetas[0].dim(1)]);
    for (term, theta) in terms.iter().zip(thetas) {
        out.add_scaled(&mat_mul(term, theta), 1.0);
    }
    out
}

/// Copies node features at time `t` for rows `r0..r0+n` out of a
/// `(rows, C, T)` slab into an `(n, C)` matrix.
fn extract_nodes(slab: &Tensor, r0: usize, n: usize, t: usize) -> Tensor {
    let c = slab.dim(1);
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for ch in 0..c {
            out.set2(i, ch, slab.at3(r0 + i, ch, t));
        }
    }
    out
}

/// Inverse of [`extract_nodes`]: writes an `(n, C)` matrix back into a slab.
fn scatter_nodes(slab: &mut Tensor, r0: usize, t: usize, m: &Tensor) {
    for i in 0..m.dim(0) {
        for ch in 0..m.dim(1) {
            let idx = slab.idx3(r0 + i, ch, t);
            slab.data_mut()[idx] = m.at2(i, ch);
        }
    }
}

/// Per-channel batch statistics over (rows x time) of a slab.
fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, c, t) = (x.dim(0), x.dim(1), x.dim(2));
    let n = (rows * t) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for r in 0..rows {
            sum += x.lane(r, ch).iter().sum::<f64>();
        }
        mean[ch] = sum / n;
        let mut sq = 0.0;
        for r in 0..rows {
            for &v in x.lane(r, ch) {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / n;
    }
    (mean, var)
}

/// Normalizes a slab with explicit per-channel statistics.
fn bn_apply(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    shift: &[f64],
) -> (Tensor, Tensor) {
    let (rows, c, _) = (x.dim(0), x.dim(1), x.dim(2));
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for r in 0..rows {
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_std[ch], scale[ch], shift[ch]);
            let xin = x.lane(r, ch);
            let xh = xhat.lane_mut(r, ch);
            for (o, &v) in xh.iter_mut().zip(xin) {
                *o = (v - m) * is;
            }
            let yl = y.lane_mut(r, ch);
            for (o, &v) in yl.iter_mut().zip(xhat.lane(r, ch)) {
                *o = g * v + b;
            }
        }
    }
    (y, xhat)
}

/// Gradient of training-mode batch normalization.
///
/// Returns the input gradient; scale/shift gradients are accumulated into
/// the provided slices.
fn bn_backward(
    bn: &BnCache,
    scale: &[f64],
    d_y: &Tensor,
    d_scale: &mut [f64],
    d_shift: &mut [f64],
) -> Tensor {
    let (rows, c, t) = (d_y.dim(0), d_y.dim(1), d_y.dim(2));
    let n = (rows * t) as f64;
    let mut d_x = Tensor::zeros(d_y.shape());
    for ch in 0..c {
        // Channel-wise sums of the upstream gradient and its correlation
        // with the normalized values.
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for r in 0..rows {
            let dyl = d_y.lane(r, ch);
            let xhl = bn.xhat.lane(r, ch);
            sum_dy += dyl.iter().sum::<f64>();
            sum_dy_xhat += dot(dyl, xhl);
        }
        d_shift[ch] += sum_dy;
        d_scale[ch] += sum_dy_xhat;
        let g = scale[ch];
        let is = bn.inv_std[ch];
        let mean_dy = sum_dy / n;
        let mean_dy_xhat = sum_dy_xhat / n;
        for r in 0..rows {
            let dyl = d_y.lane(r, ch);
            let xhl = bn.xhat.lane(r, ch);
            let dxl = d_x.lane_mut(r, ch);
            for i in 0..dxl.len() {
                // Standard batch-norm input gradient: remove the mean shift
                // and the variance coupling from the raw path.
                dxl[i] = g * is * (dyl[i] - mean_dy - xhl[i] * mean_dy_xhat);
            }
        }
    }
    d_x
}

fn check_batch_graphs(batch: &FlatBatch, graphs: &BatchGraphs) -> Result<()> {
    for b in 0..batch.n_subgraphs() {
        let n = batch.subgraph_rows(b).len();
        let lap = graphs.laplacian(graphs.key_of(b));
        if lap.shape() != [n, n] {
            return Err(Error::Shape(format!(
                "window {b} has {n} rows but a {:?} graph operator",
                lap.shape()
            )));
        }
    }
    Ok(())
}

/// Runs the encoder over a batch, producing one feature vector per flat row.
///
/// `rows` carries the (possibly augmented) input windows and must be
/// `(batch.n_rows(), history)`; the batch supplies only structure. In
/// training mode, batch statistics normalize each layer and — when
/// `update_running` is set — refresh the running statistics in `bn`.
/// Evaluation mode normalizes each row independently with the frozen
/// statistics and must not ask for running updates.
#[allow(clippy::too_many_arguments)]
pub fn stfe_forward(
    cfg: &StfeConfig,
    params: &ParamSet,
    ids: &StfeParamIds,
    bn: &mut BnState,
    update_running: bool,
    rows: &Tensor,
    batch: &FlatBatch,
    graphs: &BatchGraphs,
    mode: Mode,
) -> Result<(Tensor, ForwardCache)> {
    let b_rows = batch.n_rows();
    let c = cfg.channels;
    if rows.shape() != [b_rows, cfg.history] {
        return Err(Error::Shape(format!(
            "input rows {:?}, expected [{b_rows}, {}]",
            rows.shape(),
            cfg.history
        )));
    }
    if mode == Mode::Eval && update_running {
        return Err(Error::State(
            "running statistics can only be updated from a training-mode forward".into(),
        ));
    }
    if bn.layers.len() != ids.layers.len() {
        return Err(Error::Shape(format!(
            "{} batch-norm states for {} layers",
            bn.layers.len(),
            ids.layers.len()
        )));
    }
    check_batch_graphs(batch, graphs)?;

    // Left-pad and embed to C channels.
    let pad = cfg.padding();
    let p_len = cfg.padded_len();
    let mut x_padded = Tensor::zeros(&[b_rows, p_len]);
    for r in 0..b_rows {
        x_padded.row_mut(r)[pad..].copy_from_slice(rows.row(r));
    }
    let w_in = params.value(ids.input_weight);
    let b_in = params.value(ids.input_bias);
    let mut h = Tensor::zeros(&[b_rows, c, p_len]);
    for r in 0..b_rows {
        for ch in 0..c {
            let (w, b0) = (w_in.data()[ch], b_in.data()[ch]);
            let lane = h.lane_mut(r, ch);
            for (o, &x) in lane.iter_mut().zip(x_padded.row(r)) {
                *o = w * x + b0;
            }
        }
    }

    let mut h_out = Tensor::zeros(&[b_rows, c]);
    let mut layer_caches = Vec::with_capacity(ids.layers.len());
    let mut t_in = p_len;

    for (idx, lid) in ids.layers.iter().enumerate() {
        let (m, l) = (idx / cfg.layers_per_block, idx % cfg.layers_per_block);
        let d = cfg.dilation(l);
        let need = (cfg.kernel - 1) * d + 1;
        if t_in < need {
            return Err(Error::Shape(format!(
                "temporal underflow at block {} layer {}: {t_in} steps left, convolution needs {need}",
                m + 1,
                l + 1
            )));
        }
        let t_out = t_in - (need - 1);
        let h_in = h;

        // Stage 1: gated dilated convolution.
        let filter = params.value(lid.filter);
        let gate = params.value(lid.gate);
        let mut tanh_f = Tensor::zeros(&[b_rows, c, t_out]);
        let mut sig_g = Tensor::zeros(&[b_rows, c, t_out]);
        let slab = c * t_in;
        let slab_out = c * t_out;
        for r in 0..b_rows {
            let x = &h_in.data()[r * slab..(r + 1) * slab];
            conv_forward(
                x,
                c,
                t_in,
                filter.data(),
                c,
                cfg.kernel,
                d,
                &mut tanh_f.data_mut()[r * slab_out..(r + 1) * slab_out],
                t_out,
            );
            conv_forward(
                x,
                c,
                t_in,
                gate.data(),
                c,
                cfg.kernel,
                d,
                &mut sig_g.data_mut()[r * slab_out..(r + 1) * slab_out],
                t_out,
            );
        }
        for v in tanh_f.data_mut() {
            *v = v.tanh();
        }
        for v in sig_g.data_mut() {
            *v = sigmoid(*v);
        }

        // Stage 2: residual (cropped to the convolved length) + batch norm.
        let crop = t_in - t_out;
        let mut x_bn = Tensor::zeros(&[b_rows, c, t_out]);
        for r in 0..b_rows {
            for ch in 0..c {
                let hl = &h_in.lane(r, ch)[crop..];
                let fl = tanh_f.lane(r, ch);
                let gl = sig_g.lane(r, ch);
                let ol = x_bn.lane_mut(r, ch);
                for t in 0..t_out {
                    ol[t] = hl[t] + fl[t] * gl[t];
                }
            }
        }
        let scale = params.value(lid.bn_scale).data();
        let shift = params.value(lid.bn_shift).data();
        let (h_bn, bn_cache) = match mode {
            Mode::Train => {
                let (mean, var) = batch_stats(&x_bn);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.bn_eps).sqrt()).collect();
                if update_running {
                    let st = &mut bn.layers[idx];
                    for ch in 0..c {
                        st.mean[ch] =
                            (1.0 - cfg.bn_momentum) * st.mean[ch] + cfg.bn_momentum * mean[ch];
                        st.var[ch] =
                            (1.0 - cfg.bn_momentum) * st.var[ch] + cfg.bn_momentum * var[ch];
                    }
                }
                let (y, xhat) = bn_apply(&x_bn, &mean, &inv_std, scale, shift);
                (y, Some(BnCache { inv_std, xhat }))
            }
            Mode::Eval => {
                let st = &bn.layers[idx];
                let inv_std: Vec<f64> = st
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + cfg.bn_eps).sqrt())
                    .collect();
                let (y, _) = bn_apply(&x_bn, &st.mean, &inv_std, scale, shift);
                (y, None)
            }
        };

        // Stage 3: skip update from the gated output's last step.
        let skip_w = params.value(lid.skip_weight);
        let skip_b = params.value(lid.skip_bias).data();
        let h_out_prev = h_out;
        h_out = Tensor::zeros(&[b_rows, c]);
        for r in 0..b_rows {
            for ch in 0..c {
                let u_last = tanh_f.at3(r, ch, t_out - 1) * sig_g.at3(r, ch, t_out - 1);
                h_out.set2(
                    r,
                    ch,
                    dot(skip_w.row(ch), h_out_prev.row(r)) + skip_b[ch] + u_last,
                );
            }
        }

        // Stage 4: Chebyshev graph convolution within each subgraph.
        let thetas: Vec<&Tensor> = lid.cheb.iter().map(|&id| params.value(id)).collect();
        let mut cheb_slabs: Vec<Tensor> = (0..cfg.cheb_order)
            .map(|_| Tensor::zeros(&[b_rows, c, t_out]))
            .collect();
        let mut h_next = Tensor::zeros(&[b_rows, c, t_out]);
        for b in 0..batch.n_subgraphs() {
            let range = batch.subgraph_rows(b);
            let (r0, n) = (range.start, range.len());
            let lap = graphs.laplacian(graphs.key_of(b));
            for t in 0..t_out {
                let x = extract_nodes(&h_bn, r0, n, t);
                let terms = cheb_terms(lap, &x, cfg.cheb_order);
                let mut out = Tensor::zeros(&[n, c]);
                for (j, term) in terms.iter().enumerate() {
                    scatter_nodes(&mut cheb_slabs[j], r0, t, term);
                    out.add_scaled(&mat_mul(term, thetas[j]), 1.0);
                }
                scatter_nodes(&mut h_next, r0, t, &out);
            }
        }

        layer_caches.push(LayerCache {
            t_in,
            t_out,
            dilation: d,
            h_in,
            tanh_f,
            sig_g,
            bn: bn_cache,
            h_out_prev,
            cheb_terms: cheb_slabs,
        });
        h = h_next;
        t_in = t_out;
    }

    Ok((
        h_out,
        ForwardCache {
            mode,
            x_padded,
            layers: layer_caches,
        },
    ))
}

/// Backpropagates a gradient on the feature summary through the whole
/// stack, accumulating parameter gradients and per-key graph-operator
/// gradients (`d_laplacians` must be key-parallel, see
/// [`BatchGraphs::laplacian_grad_buffers`]).
#[allow(clippy::too_many_arguments)]
pub fn stfe_backward(
    cfg: &StfeConfig,
    params: &ParamSet,
    ids: &StfeParamIds,
    cache: &ForwardCache,
    batch: &FlatBatch,
    graphs: &BatchGraphs,
    d_features: &Tensor,
    grads: &mut GradSet,
    d_laplacians: &mut [Tensor],
) -> Result<()> {
    if cache.mode != Mode::Train {
        return Err(Error::State(
            "gradients require a training-mode forward cache".into(),
        ));
    }
    let b_rows = batch.n_rows();
    let c = cfg.channels;
    if d_features.shape() != [b_rows, c] {
        return Err(Error::Shape(format!(
            "feature gradient {:?}, expected [{b_rows}, {c}]",
            d_features.shape()
        )));
    }
    if d_laplacians.len() != graphs.n_keys() {
        return Err(Error::Shape(format!(
            "{} graph gradients for {} distinct subgraphs",
            d_laplacians.len(),
            graphs.n_keys()
        )));
    }

    let mut d_h_out = d_features.clone();
    // Gradient w.r.t. the layer's graph-conv output; zero after the last
    // layer because only the skip summary feeds the features.
    let final_t = cache
        .layers
        .last()
        .map(|lc| lc.t_out)
        .unwrap_or(cfg.padded_len());
    let mut d_h = Tensor::zeros(&[b_rows, c, final_t]);

    for (idx, lc) in cache.layers.iter().enumerate().rev() {
        let lid = &ids.layers[idx];
        let (t_in, t_out) = (lc.t_in, lc.t_out);
        let thetas: Vec<&Tensor> = lid.cheb.iter().map(|&id| params.value(id)).collect();

        // Stage 4 backward: Chebyshev conv. d_h is the gradient on its
        // output; produce the gradient on the normalized activations.
        let mut d_bn_out = Tensor::zeros(&[b_rows, c, t_out]);
        for b in 0..batch.n_subgraphs() {
            let range = batch.subgraph_rows(b);
            let (r0, n) = (range.start, range.len());
            let key = graphs.key_of(b);
            let lap = graphs.laplacian(key);
            for t in 0..t_out {
                let dout = extract_nodes(&d_h, r0, n, t);
                let terms: Vec<Tensor> = (0..cfg.cheb_order)
                    .map(|j| extract_nodes(&lc.cheb_terms[j], r0, n, t))
                    .collect();
                // Direct coefficient gradients and per-term output pulls.
                let mut d_terms: Vec<Tensor> = Vec::with_capacity(cfg.cheb_order);
                for j in 0..cfg.cheb_order {
                    mat_acc_tn(1.0, &terms[j], &dout, grads.grad_mut(lid.cheb[j]));
                    d_terms.push(mat_mul_bt(&dout, thetas[j]));
                }
                // Reverse the recursion T_j = 2 L T_{j-1} - T_{j-2}.
                for j in (2..cfg.cheb_order).rev() {
                    mat_acc_outer(2.0, &d_terms[j], &terms[j - 1], &mut d_laplacians[key]);
                    let pull = mat_mul(lap, &d_terms[j]);
                    d_terms[j - 1].add_scaled(&pull, 2.0);
                    let tail = d_terms[j].clone();
                    d_terms[j - 2].add_scaled(&tail, -1.0);
                }
                if cfg.cheb_order >= 2 {
                    mat_acc_outer(1.0, &d_terms[1], &terms[0], &mut d_laplacians[key]);
                    let pull = mat_mul(lap, &d_terms[1]);
                    d_terms[0].add_scaled(&pull, 1.0);
                }
                scatter_nodes(&mut d_bn_out, r0, t, &d_terms[0]);
            }
        }

        // Stage 3 backward: skip update. The incoming d_h_out is the
        // gradient on this layer's updated summary.
        let d_u_last = d_h_out.clone();
        let skip_w = params.value(lid.skip_weight);
        {
            let d_w = grads.grad_mut(lid.skip_weight);
            for r in 0..b_rows {
                for ch in 0..c {
                    let g = d_h_out.at2(r, ch);
                    if g != 0.0 {
                        axpy(d_w.row_mut(ch), g, lc.h_out_prev.row(r));
                    }
                }
            }
        }
        {
            let d_b = grads.grad_mut(lid.skip_bias).data_mut();
            for r in 0..b_rows {
                for ch in 0..c {
                    d_b[ch] += d_h_out.at2(r, ch);
                }
            }
        }
        let mut d_h_out_prev = Tensor::zeros(&[b_rows, c]);
        for r in 0..b_rows {
            for ch in 0..c {
                let g = d_h_out.at2(r, ch);
                if g != 0.0 {
                    axpy(d_h_out_prev.row_mut(r), g, skip_w.row(ch));
                }
            }
        }
        d_h_out = d_h_out_prev;

        // Stage 2 backward: batch norm.
        let bn_cache = lc.bn.as_ref().expect("training cache has batch statistics");
        let scale = params.value(lid.bn_scale).data();
        let d_x = {
            // Split borrows: scale/shift gradients live in different slots.
            let mut d_scale = vec![0.0; c];
            let mut d_shift = vec![0.0; c];
            let d_x = bn_backward(bn_cache, scale, &d_bn_out, &mut d_scale, &mut d_shift);
            axpy(grads.grad_mut(lid.bn_scale).data_mut(), 1.0, &d_scale);
            axpy(grads.grad_mut(lid.bn_shift).data_mut(), 1.0, &d_shift);
            d_x
        };

        // Stage 1 backward: the residual splits into the cropped identity
        // path and the gated branch; the gate splits into both convolutions.
        let crop = t_in - t_out;
        let mut d_h_in = Tensor::zeros(&[b_rows, c, t_in]);
        for r in 0..b_rows {
            for ch in 0..c {
                let dxl = d_x.lane(r, ch);
                let dhl = &mut d_h_in.lane_mut(r, ch)[crop..];
                for t in 0..t_out {
                    dhl[t] += dxl[t];
                }
            }
        }
        // d_u collects the BN residual path plus the skip pull at the last step.
        let mut d_f = Tensor::zeros(&[b_rows, c, t_out]);
        let mut d_g = Tensor::zeros(&[b_rows, c, t_out]);
        for r in 0..b_rows {
            for ch in 0..c {
                let fl = lc.tanh_f.lane(r, ch);
                let gl = lc.sig_g.lane(r, ch);
                let dxl = d_x.lane(r, ch);
                let dfl = d_f.lane_mut(r, ch);
                for t in 0..t_out {
                    let mut du = dxl[t];
                    if t == t_out - 1 {
                        du += d_u_last.at2(r, ch);
                    }
                    dfl[t] = du * gl[t] * (1.0 - fl[t] * fl[t]);
                }
                let dgl = d_g.lane_mut(r, ch);
                for t in 0..t_out {
                    let mut du = dxl[t];
                    if t == t_out - 1 {
                        du += d_u_last.at2(r, ch);
                    }
                    dgl[t] = du * fl[t] * gl[t] * (1.0 - gl[t]);
                }
            }
        }
        let filter = params.value(lid.filter);
        let gate = params.value(lid.gate);
        let slab = c * t_in;
        let slab_out = c * t_out;
        {
            let d_filter = grads.grad_mut(lid.filter);
            for r in 0..b_rows {
                let x = &lc.h_in.data()[r * slab..(r + 1) * slab];
                let dy = &d_f.data()[r * slab_out..(r + 1) * slab_out];
                conv_backward_kernel(
                    x,
                    c,
                    t_in,
                    d_filter.data_mut(),
                    c,
                    cfg.kernel,
                    lc.dilation,
                    dy,
                    t_out,
                );
            }
        }
        {
            let d_gate = grads.grad_mut(lid.gate);
            for r in 0..b_rows {
                let x = &lc.h_in.data()[r * slab..(r + 1) * slab];
                let dy = &d_g.data()[r * slab_out..(r + 1) * slab_out];
                conv_backward_kernel(
                    x,
                    c,
                    t_in,
                    d_gate.data_mut(),
                    c,
                    cfg.kernel,
                    lc.dilation,
                    dy,
                    t_out,
                );
            }
        }
        for r in 0..b_rows {
            let dx = &mut d_h_in.data_mut()[r * slab..(r + 1) * slab];
            conv_backward_input(
                dx,
                c,
                t_in,
                filter.data(),
                c,
                cfg.kernel,
                lc.dilation,
                &d_f.data()[r * slab_out..(r + 1) * slab_out],
                t_out,
            );
            conv_backward_input(
                dx,
                c,
                t_in,
                gate.data(),
                c,
                cfg.kernel,
                lc.dilation,
                &d_g.data()[r * slab_out..(r + 1) * slab_out],
                t_out,
            );
        }
        d_h = d_h_in;
    }

    // Input embedding backward: h[r][ch][t] = w[ch] * x[r][t] + b[ch].
    {
        let d_w = grads.grad_mut(ids.input_weight).data_mut();
        for r in 0..b_rows {
            for ch in 0..c {
                d_w[ch] += dot(d_h.lane(r, ch), cache.x_padded.row(r));
            }
        }
    }
    {
        let d_b = grads.grad_mut(ids.input_bias).data_mut();
        for r in 0..b_rows {
            for ch in 0..c {
                d_b[ch] += d_h.lane(r, ch).iter().sum::<f64>();
            }
        }
    }
    Ok(())
}

/// Intermediates for [`output_head_backward`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    h: Tensor,
    z1: Tensor,
}

/// Two-stage forecast head: `W2 relu(W1 h + b1) + b2`, per row.
pub fn output_head(
    cfg: &StfeConfig,
    params: &ParamSet,
    ids: &StfeParamIds,
    h: &Tensor,
) -> Result<(Tensor, HeadCache)> {
    let rows = h.dim(0);
    if h.shape() != [rows, cfg.channels] {
        return Err(Error::Shape(format!(
            "head input {:?}, expected [.., {}]",
            h.shape(),
            cfg.channels
        )));
    }
    let w1 = params.value(ids.head_w1);
    let b1 = params.value(ids.head_b1).data();
    let w2 = params.value(ids.head_w2);
    let b2 = params.value(ids.head_b2).data();
    let mut z1 = Tensor::zeros(&[rows, cfg.head_hidden]);
    for r in 0..rows {
        for hh in 0..cfg.head_hidden {
            z1.set2(r, hh, dot(w1.row(hh), h.row(r)) + b1[hh]);
        }
    }
    let mut y = Tensor::zeros(&[rows, cfg.horizon]);
    for r in 0..rows {
        let a1: Vec<f64> = z1.row(r).iter().map(|&v| v.max(0.0)).collect();
        for q in 0..cfg.horizon {
            y.set2(r, q, dot(w2.row(q), &a1) + b2[q]);
        }
    }
    Ok((y, HeadCache { h: h.clone(), z1 }))
}

/// Backpropagates a forecast gradient through the head, returning the
/// gradient on the feature input.
pub fn output_head_backward(
    cfg: &StfeConfig,
    params: &ParamSet,
    ids: &StfeParamIds,
    cache: &HeadCache,
    d_y: &Tensor,
    grads: &mut GradSet,
) -> Result<Tensor> {
    let rows = cache.h.dim(0);
    if d_y.shape() != [rows, cfg.horizon] {
        return Err(Error::Shape(format!(
            "forecast gradient {:?}, expected [{rows}, {}]",
            d_y.shape(),
            cfg.horizon
        )));
    }
    let w1 = params.value(ids.head_w1);
    let w2 = params.value(ids.head_w2);
    let mut d_h = Tensor::zeros(&[rows, cfg.channels]);
    for r in 0..rows {
        let a1: Vec<f64> = cache.z1.row(r).iter().map(|&v| v.max(0.0)).collect();
        // Second stage.
        let mut d_a1 = vec![0.0; cfg.head_hidden];
        {
            let d_w2 = grads.grad_mut(ids.head_w2);
            for q in 0..cfg.horizon {
                let g = d_y.at2(r, q);
                if g != 0.0 {
                    axpy(d_w2.row_mut(q), g, &a1);
                    axpy(&mut d_a1, g, w2.row(q));
                }
            }
        }
        axpy(grads.grad_mut(ids.head_b2).data_mut(), 1.0, d_y.row(r));
        // ReLU gate, then first stage.
        let z1 = cache.z1.row(r);
        let d_z1: Vec<f64> = d_a1
            .iter()
            .zip(z1)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();
        {
            let d_w1 = grads.grad_mut(ids.head_w1);
            for hh in 0..cfg.head_hidden {
                if d_z1[hh] != 0.0 {
                    axpy(d_w1.row_mut(hh), d_z1[hh], cache.h.row(r));
                    axpy(d_h.row_mut(r), d_z1[hh], w1.row(hh));
                }
            }
        }
        axpy(grads.grad_mut(ids.head_b1).data_mut(), 1.0, &d_z1);
    }
    Ok(d_h)
}
