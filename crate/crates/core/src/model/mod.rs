//! Frozen ViT backbone plus trainable prompts: construction, freezing,
//! parameter accounting and persistence.

pub mod backbone;
pub mod checkpoint;
pub mod params;
pub mod pretrained;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::flexdata::DenseInput;
use crate::prompt::{prompt_specs, prompted_forward, ForwardOutput, PromptState};
use crate::scalar::Scalar;
use backbone::{backbone_specs, BackboneWeights, HEAD_PREFIX};

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub backbone: BackboneWeights<T>,
    pub prompts: PromptState<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(backbone: BackboneWeights<T>, prompts: PromptState<T>) -> Result<Self, ModelError> {
        if backbone.config() != prompts.config() {
            return Err(crate::error::ConfigError::Invalid(
                "backbone and prompt configs differ".into(),
            )
            .into());
        }
        Ok(Self { backbone, prompts })
    }

    /// Seeded random backbone and prompts, backbone frozen.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut backbone = BackboneWeights::random(cfg, seed)?;
        backbone.freeze();
        let prompts = PromptState::random(cfg, seed.wrapping_add(0x5eed))?;
        Self::new(backbone, prompts)
    }

    pub fn config(&self) -> &ModelConfig {
        self.backbone.config()
    }

    pub fn freeze_backbone(&mut self) {
        self.backbone.freeze();
    }

    pub fn forward(&self, input: &DenseInput) -> Result<ForwardOutput<T>, ModelError> {
        prompted_forward(self, input)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let trainable =
            self.backbone.store().trainable_numel() + self.prompts.store().trainable_numel();
        let total = self.backbone.store().numel() + self.prompts.store().numel();
        ParamCounts { trainable, total }
    }

    /// Trainable scalars over all scalars.
    pub fn trainable_param_ratio(&self) -> f64 {
        self.param_counts().ratio()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCounts {
    /// Counts for a frozen-backbone model without allocating any weights.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut trainable = 0;
        let mut total = 0;
        for s in backbone_specs(cfg) {
            total += s.numel();
            if s.name.starts_with(HEAD_PREFIX) {
                trainable += s.numel();
            }
        }
        for s in prompt_specs(cfg) {
            total += s.numel();
            trainable += s.numel();
        }
        Self { trainable, total }
    }

    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}
