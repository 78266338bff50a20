//! The flat run configuration: one JSON document of key/value pairs
//! covering data generation, the model, and training.
//!
//! Flat on purpose — a run is pinned by hashing one small file, and every
//! key works as a command-line story ("set `alpha` to 0.5") without a path
//! syntax. Unknown keys are rejected by name; omitted keys take the
//! defaults documented on each field, which reproduce the standard
//! benchmark panel (12 variables, expansion at slot 720) and the default
//! training recipe.

use crate::{read_input, IoError, Result};
use evtsf_core::contrast::{AugmentMethod, Similarity};
use evtsf_core::data::{GenConfig, PartitionMode};
use evtsf_core::model::{ModelConfig, Variant};
use evtsf_core::train::{Strategy, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // --- data generation ---
    /// Seed for the synthetic panel (independent of the training seed). 0.
    pub data_seed: u64,
    /// Sensors observed from the start. 8.
    pub n_continual: usize,
    /// Sensors added per expansion stage. [4].
    pub n_expanding: Vec<usize>,
    /// Slots per day. 24.
    pub steps_per_day: usize,
    /// Pre-expansion training days. 30.
    pub days_p1: usize,
    /// Post-expansion training days per stage. [3].
    pub days_p2: Vec<usize>,
    /// Validation days. 2.
    pub days_valid: usize,
    /// Test days. 7.
    pub days_test: usize,
    /// How the initial variable set is chosen: "area", "spatial", or
    /// "internal". "area".
    pub partition: PartitionMode,
    /// Length scale (km) of the generator's distance-decayed affinity. 30.
    pub sigma_km: f64,
    /// Neighbor-diffusion share per tick. 0.35.
    pub coupling: f64,
    /// Latent-state retention per tick. 0.9.
    pub latent_decay: f64,
    /// Std of the latent innovation. 1.
    pub latent_noise: f64,
    /// Std of the measurement noise. 0.3.
    pub obs_noise: f64,
    /// Daily-cycle amplitude range. 3 to 8.
    pub amp_min: f64,
    pub amp_max: f64,
    /// Base-level range. 20 to 40.
    pub base_min: f64,
    pub base_max: f64,

    // --- model ---
    /// Input window length in slots. 12.
    pub history: usize,
    /// Forecast horizon in slots. 12.
    pub horizon: usize,
    /// Node-embedding width. 20.
    pub node_dim: usize,
    /// Width of each calendar embedding (time-of-day, day-of-week). 10.
    pub time_dim: usize,
    /// Convolution channels. 32.
    pub channels: usize,
    /// Spatio-temporal blocks. 4.
    pub blocks: usize,
    /// Gated convolution layers per block. 2.
    pub layers_per_block: usize,
    /// Convolution kernel length. 2.
    pub kernel: usize,
    /// Dilation growth factor across a block's layers. 2.
    pub dilation_base: usize,
    /// Chebyshev order of the graph convolution. 3.
    pub cheb_order: usize,
    /// Hidden width of the forecast head. 32.
    pub head_hidden: usize,
    /// Batch-norm running-average momentum. 0.1.
    pub bn_momentum: f64,
    /// Batch-norm variance floor. 1e-5.
    pub bn_eps: f64,
    /// Contrastive projection width. 32.
    pub proj_dim: usize,
    /// Contrastive temperature. 0.5.
    pub tau: f64,
    /// Temperature multiplier for expanding rows, in (0, 1]. 0.3.
    pub alpha: f64,
    /// Row-similarity measure: "dot" or "cosine". "dot".
    pub similarity: Similarity,
    /// View augmentation: "jitter", "mixup", or "hybrid". "hybrid".
    pub augment_method: AugmentMethod,
    /// Jitter noise std, as a fraction of each row's std. 0.1.
    pub jitter_std: f64,
    /// Peak drift amplitude, as a fraction of each row's std. 0.1.
    pub drift_max: f64,
    /// Quantization levels of the hybrid augmentation. 20.
    pub quant_levels: usize,
    /// Beta(b, b) concentration for mixup weights. 0.2.
    pub mixup_beta: f64,

    // --- training ---
    /// Loss variant: "flats", "flats_cl", "flats_nf", or "focal". "focal".
    pub variant: Variant,
    /// Pooling strategy: "stev", "fptm", "oversample", or "augment". "stev".
    pub strategy: Strategy,
    /// Windows per mini-batch. 16.
    pub batch_size: usize,
    /// Adam learning rate. 1e-3.
    pub lr: f64,
    /// Non-improving validation epochs tolerated. 10.
    pub patience: usize,
    /// Epoch cap. 150.
    pub max_epochs: usize,
    /// Training seed (initialization, shuffling, augmentation). 0.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let model = ModelConfig::new(gen.n_vars(), gen.steps_per_day, 12, 12);
        let train = TrainConfig::new(model.clone());
        RunConfig {
            data_seed: 0,
            n_continual: gen.n_continual,
            n_expanding: gen.n_expanding,
            steps_per_day: gen.steps_per_day,
            days_p1: gen.days_p1,
            days_p2: gen.days_p2,
            days_valid: gen.days_valid,
            days_test: gen.days_test,
            partition: gen.partition,
            sigma_km: gen.sigma_km,
            coupling: gen.coupling,
            latent_decay: gen.latent_decay,
            latent_noise: gen.latent_noise,
            obs_noise: gen.obs_noise,
            amp_min: gen.amp_min,
            amp_max: gen.amp_max,
            base_min: gen.base_min,
            base_max: gen.base_max,
            history: model.stfe.history,
            horizon: model.stfe.horizon,
            node_dim: model.graph.node_dim,
            time_dim: model.graph.time_dim,
            channels: model.stfe.channels,
            blocks: model.stfe.blocks,
            layers_per_block: model.stfe.layers_per_block,
            kernel: model.stfe.kernel,
            dilation_base: model.stfe.dilation_base,
            cheb_order: model.stfe.cheb_order,
            head_hidden: model.stfe.head_hidden,
            bn_momentum: model.stfe.bn_momentum,
            bn_eps: model.stfe.bn_eps,
            proj_dim: model.proj_dim,
            tau: model.tau,
            alpha: model.alpha,
            similarity: model.similarity,
            augment_method: model.augment.method,
            jitter_std: model.augment.jitter_std,
            drift_max: model.augment.drift_max,
            quant_levels: model.augment.quant_levels,
            mixup_beta: model.augment.mixup_beta,
            variant: train.variant,
            strategy: train.strategy,
            batch_size: train.batch_size,
            lr: train.lr,
            patience: train.patience,
            max_epochs: train.max_epochs,
            seed: train.seed,
        }
    }
}

impl RunConfig {
    /// Parses a JSON document; an unknown key fails with a message naming
    /// it.
    pub fn parse(json: &str) -> Result<RunConfig> {
        serde_json::from_str(json).map_err(|e| IoError::Input(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::parse(&read_input(path)?).map_err(|e| match e {
            IoError::Input(msg) => IoError::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The generation keys, as the generator consumes them.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n_continual: self.n_continual,
            n_expanding: self.n_expanding.clone(),
            steps_per_day: self.steps_per_day,
            days_p1: self.days_p1,
            days_p2: self.days_p2.clone(),
            days_valid: self.days_valid,
            days_test: self.days_test,
            partition: self.partition,
            sigma_km: self.sigma_km,
            coupling: self.coupling,
            latent_decay: self.latent_decay,
            latent_noise: self.latent_noise,
            obs_noise: self.obs_noise,
            amp_min: self.amp_min,
            amp_max: self.amp_max,
            base_min: self.base_min,
            base_max: self.base_max,
        }
    }

    /// The model and training keys, bound to a concrete panel's variable
    /// count and calendar (always taken from the dataset being trained on,
    /// not from this document's generation keys).
    pub fn train_config(&self, n_vars: usize, steps_per_day: usize) -> TrainConfig {
        let mut model = ModelConfig::new(n_vars, steps_per_day, self.history, self.horizon);
        model.graph.node_dim = self.node_dim;
        model.graph.time_dim = self.time_dim;
        model.stfe.channels = self.channels;
        model.stfe.blocks = self.blocks;
        model.stfe.layers_per_block = self.layers_per_block;
        model.stfe.kernel = self.kernel;
        model.stfe.dilation_base = self.dilation_base;
        model.stfe.cheb_order = self.cheb_order;
        model.stfe.head_hidden = self.head_hidden;
        model.stfe.bn_momentum = self.bn_momentum;
        model.stfe.bn_eps = self.bn_eps;
        model.proj_dim = self.proj_dim;
        model.tau = self.tau;
        model.alpha = self.alpha;
        model.similarity = self.similarity;
        model.augment.method = self.augment_method;
        model.augment.jitter_std = self.jitter_std;
        model.augment.drift_max = self.drift_max;
        model.augment.quant_levels = self.quant_levels;
        model.augment.mixup_beta = self.mixup_beta;

        let mut train = TrainConfig::new(model);
        train.variant = self.variant;
        train.strategy = self.strategy;
        train.batch_size = self.batch_size;
        train.lr = self.lr;
        train.patience = self.patience;
        train.max_epochs = self.max_epochs;
        train.seed = self.seed;
        train
    }
}
