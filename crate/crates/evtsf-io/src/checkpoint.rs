//! Model checkpoints: one JSON file, bit-exact across save/load.
//!
//! A checkpoint is self-contained: the training configuration (which fixes
//! every tensor's name and shape), the best epoch's parameters keyed by
//! their canonical names (`graph.node_embed`, `block0.layer1.filter`, …),
//! the batch-norm running statistics, the fitted normalizer, and the
//! training curves. Loading rebuilds the model from the configuration and
//! then overwrites every tensor from the file, refusing checkpoints whose
//! name set or shapes disagree with the configuration they claim.

use crate::{read_input, to_json_string, write_output, IoError, Result};
use evtsf_core::data::Normalizer;
use evtsf_core::model::Model;
use evtsf_core::stfe::BnState;
use evtsf_core::tensor::Tensor;
use evtsf_core::train::{EpochRecord, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// One tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized form of a finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub curves: Vec<EpochRecord>,
    pub normalizer: Normalizer,
    pub bn: BnState,
    /// Canonical parameter name → tensor, sorted by name.
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn from_outcome(cfg: &TrainConfig, outcome: &TrainOutcome) -> Self {
        let params = outcome
            .model
            .params
            .iter()
            .map(|(name, tensor)| {
                (
                    name.to_string(),
                    ParamEntry {
                        shape: tensor.shape().to_vec(),
                        data: tensor.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            config: cfg.clone(),
            best_epoch: outcome.best_epoch,
            best_val_mae: outcome.best_val_mae,
            curves: outcome.curves.clone(),
            normalizer: outcome.normalizer.clone(),
            bn: outcome.model.bn.clone(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_output(path, &to_json_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        serde_json::from_str(&read_input(path)?)
            .map_err(|e| IoError::Input(format!("malformed checkpoint {}: {e}", path.display())))
    }

    /// Rebuilds the run this checkpoint came from. The parameter names must
    /// cover the configuration's registration exactly — no more, no less —
    /// and every tensor must be finite and correctly shaped.
    pub fn to_outcome(&self) -> Result<TrainOutcome> {
        self.config.validate()?;
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;

        let names: Vec<String> = model
            .params
            .iter()
            .map(|(name, _)| name.to_string())
            .collect();
        for name in &names {
            let entry = self.params.get(name).ok_or_else(|| {
                IoError::Input(format!("checkpoint is missing parameter {name:?}"))
            })?;
            let id = model.params.find(name).expect("name came from this set");
            if entry.shape != model.params.value(id).shape() {
                return Err(IoError::Input(format!(
                    "checkpoint parameter {name:?} has shape {:?}, expected {:?}",
                    entry.shape,
                    model.params.value(id).shape()
                )));
            }
            if !entry.data.iter().all(|v| v.is_finite()) {
                return Err(IoError::Input(format!(
                    "checkpoint parameter {name:?} contains non-finite values"
                )));
            }
            *model.params.value_mut(id) = Tensor::from_vec(&entry.shape, entry.data.clone())?;
        }
        for name in self.params.keys() {
            if model.params.find(name).is_none() {
                return Err(IoError::Input(format!(
                    "checkpoint carries unknown parameter {name:?}"
                )));
            }
        }
        model.bn = self.bn.clone();

        Ok(TrainOutcome {
            model,
            normalizer: self.normalizer.clone(),
            curves: self.curves.clone(),
            best_epoch: self.best_epoch,
            best_val_mae: self.best_val_mae,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use evtsf_core::data::{generate_synthetic, make_windows, GenConfig};
    use evtsf_core::flat::flatten;
    use evtsf_core::model::ModelConfig;
    use evtsf_core::rng::StreamRng;
    use evtsf_core::train::train;

    fn trained_pair() -> (evtsf_core::data::EvtsDataset, TrainConfig, TrainOutcome) {
        let gen = GenConfig {
            n_continual: 4,
            n_expanding: vec![2],
            steps_per_day: 12,
            days_p1: 10,
            days_p2: vec![2],
            days_valid: 1,
            days_test: 2,
            ..GenConfig::default()
        };
        let ds = generate_synthetic(&gen, &StreamRng::from_seed(21)).unwrap();
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
        cfg.max_epochs = 1;
        cfg.seed = 3;
        let outcome = train(&ds, &cfg).unwrap();
        (ds, cfg, outcome)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (ds, cfg, outcome) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        let ckpt = Checkpoint::from_outcome(&cfg, &outcome);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_outcome().unwrap();

        for (a, b) in outcome.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.shape(), b.1.shape());
            assert_eq!(a.1.data(), b.1.data(), "parameter {} changed", a.0);
        }
        assert_eq!(back.model.bn, outcome.model.bn);
        assert_eq!(back.normalizer, outcome.normalizer);
        assert_eq!(back.curves, outcome.curves);
        assert_eq!(back.best_epoch, outcome.best_epoch);
        assert_eq!(back.best_val_mae, outcome.best_val_mae);

        // The reloaded model predicts bit-identically.
        let windows = make_windows(&ds, ds.splits.test, 6, 3).unwrap();
        let batch = flatten(&windows[..4]).unwrap();
        let a = outcome.model.predict(&batch).unwrap();
        let b = back.model.predict(&batch).unwrap();
        assert_eq!(a.data(), b.data());

        // Saving the reloaded run reproduces the file byte for byte.
        let path2 = dir.path().join("again.json");
        Checkpoint::from_outcome(&cfg, &back).save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn damaged_checkpoints_are_rejected_with_names() {
        let (_, cfg, outcome) = trained_pair();
        let good = Checkpoint::from_outcome(&cfg, &outcome);

        let mut missing = good.clone();
        missing.params.remove("proj.weight");
        let err = missing.to_outcome().unwrap_err();
        assert!(err.to_string().contains("proj.weight"));

        let mut extra = good.clone();
        extra.params.insert(
            "nonsense".into(),
            ParamEntry {
                shape: vec![1],
                data: vec![0.0],
            },
        );
        let err = extra.to_outcome().unwrap_err();
        assert!(err.to_string().contains("nonsense"));

        let mut reshaped = good.clone();
        let entry = reshaped.params.get_mut("proj.bias").unwrap();
        entry.shape = vec![entry.data.len() + 1];
        entry.data.push(0.0);
        assert!(matches!(reshaped.to_outcome(), Err(IoError::Input(_))));

        let mut poisoned = good;
        poisoned.params.get_mut("proj.bias").unwrap().data[0] = f64::NAN;
        // NaN also cannot survive a JSON roundtrip; reject it directly too.
        assert!(matches!(poisoned.to_outcome(), Err(IoError::Input(_))));
    }

    #[test]
    fn unparseable_files_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        std::fs::write(&path, "{ this is not json").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, IoError::Input(_)));
        assert!(err.to_string().contains("checkpoint"));
        assert!(Checkpoint::load(&dir.path().join("absent.json")).is_err());
    }
}
