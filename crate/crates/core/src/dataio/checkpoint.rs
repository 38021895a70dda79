use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, DataError, Result};
use crate::diffcore::Matrix;
use crate::model::{ModelConfig, MrineModel};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub value: Vec<Vec<f64>>,
}

/// A trained model with everything needed to rebuild and audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub code_version: String,
    /// The run config exactly as given, in canonical form.
    pub config: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub tau: f64,
    pub seed: u64,
    pub epochs: usize,
    pub params: Vec<NamedTensor>,
}

fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

impl Checkpoint {
    pub fn new(model: &MrineModel, config: String, train_config: &TrainConfig, epochs: usize) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            tau: train_config.loss.tau,
            seed: train_config.seed,
            epochs,
            params: model.named_params().into_iter().map(|(name, m)| NamedTensor { name, value: nested(m) }).collect(),
        }
    }

    /// Rebuilds the model, checking every parameter name and shape.
    pub fn model(&self) -> Result<MrineModel> {
        let mut model = MrineModel::init(&self.model_config, 0)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.params.len() {
            return Err(DataError::Checkpoint(format!("{} tensors, model has {}", self.params.len(), names.len())));
        }
        for ((slot, name), t) in model.params_mut().into_iter().zip(&names).zip(&self.params) {
            if &t.name != name {
                return Err(DataError::Checkpoint(format!("tensor {:?} where {name:?} was expected", t.name)));
            }
            let rows = t.value.len();
            let cols = t.value.first().map_or(0, Vec::len);
            if rows != slot.rows || cols != slot.cols || t.value.iter().any(|r| r.len() != cols) {
                return Err(DataError::Checkpoint(format!("{name}: shape {rows}×{cols}, expected {}×{}", slot.rows, slot.cols)));
            }
            slot.data = t.value.concat();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| DataError::Checkpoint(e.to_string()))?;
        write_atomic(path, (json + "\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DataError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| DataError::Io { path: path.to_path_buf(), msg: e.to_string() })?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| DataError::Checkpoint(e.to_string()))?;
        if ck.schema_version != CHECKPOINT_SCHEMA {
            return Err(DataError::Checkpoint(format!("schema_version {} (supported: {CHECKPOINT_SCHEMA})", ck.schema_version)));
        }
        Ok(ck)
    }
}
