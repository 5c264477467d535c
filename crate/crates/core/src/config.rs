//! The run configuration file (TOML). Every table is optional; missing keys
//! take their defaults and unknown keys are rejected.
//!
//! ```toml
//! [train]
//! steps = 500
//! batch_size = 16
//! lr_g = 2e-4
//! lr_d = 2e-4
//! adam_beta1 = 0.5
//! adam_beta2 = 0.999
//! seed = 0
//! checkpoint_every = 100
//! resolution = [128, 128]
//! d_steps_per_g_step = 1
//! history_len = 100
//!
//! [generator]
//! base_width = 32
//!
//! [discriminator]
//! channels = [1, 32, 64, 128, 128]
//!
//! [loss_weights]
//! adversarial = 1.0
//! perceptual = 1.0
//!
//! [lpips]
//! weights = "vgg16.safetensors"   # optional
//!
//! [fid]
//! weights = "inception.safetensors"   # optional
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureModelConfig;
use crate::losses::{LossWeights, LpipsConfig};
use crate::models::{DiscriminatorConfig, GeneratorConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss_weights: LossWeights,
    pub lpips: LpipsConfig,
    pub fid: FeatureModelConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        Ok(())
    }
}
