use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::model::ModelKind;
use crate::data::DataDims;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metalearner::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: Dims,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub use_adapter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 64,
            epochs: 60,
            seed: 0,
            model_kind: ModelKind::Metaage,
            use_adapter: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        Ok(())
    }

    /// Errors naming the first field where `data` disagrees with `dims`.
    pub fn check_data(&self, data: &DataDims) -> Result<()> {
        for (name, want, got) in [
            ("classes (K)", self.dims.classes, data.classes),
            ("age_dim (D)", self.dims.age_dim, data.age_dim),
            ("identity_dim (F)", self.dims.identity_dim, data.identity_dim),
        ] {
            if want != got {
                return Err(Error::shape(name, want, got));
            }
        }
        Ok(())
    }
}
