use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InputDims, ModelConfig, SpadeModel};
use crate::autodiff::NamedTensor;
use crate::error::{ForecastError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Serializable trained model. JSON floats round-trip exactly, so a reloaded
/// model forecasts bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub config: ModelConfig,
    pub dims: InputDims,
    pub params: Vec<NamedTensor>,
    pub log: TrainingLog,
}

impl TrainedModel {
    pub fn from_model(model: &SpadeModel, log: TrainingLog) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            dims: model.dims,
            params: model.store.snapshot(),
            log,
        }
    }

    pub fn to_model(&self) -> Result<SpadeModel> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(ForecastError::CheckpointVersion(self.format_version));
        }
        let mut model = SpadeModel::new(&self.config, self.dims)?;
        model.store.restore(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let v: serde_json::Value = serde_json::from_slice(&bytes)?;
        if let Some(ver) = v.get("format_version").and_then(|x| x.as_u64()) {
            if ver != CHECKPOINT_VERSION as u64 {
                return Err(ForecastError::CheckpointVersion(ver as u32));
            }
        }
        Ok(serde_json::from_value(v)?)
    }
}
