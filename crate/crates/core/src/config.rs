//! Architecture and regularization hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Which prompt families occupy the `p` prompt slots of every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptLayout {
    /// `p/2` vanilla prompts followed by `p/2` residual contextual prompts.
    #[default]
    Full,
    /// All `p` slots are vanilla prompts (VPT-deep).
    VanillaOnly,
    /// All `p` slots are residual contextual prompts.
    ContextualOnly,
}

/// How the pooled context vector fills the contextual prompt block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpandMode {
    /// Every slot is a copy of the context vector.
    #[default]
    Replicate,
    /// Slot `k` is `g_k · context` with a learned per-layer gain vector.
    LearnedGain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_modalities: usize,
    pub prompt_length: usize,
    pub hidden_dim: usize,
    pub cd_intensity: f64,
    pub mask_ratio: f64,
    pub mmr_weight: f64,
    /// Pixels enter the patch embedding as `(v - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub shared_patch_embed: bool,
    pub prompt_layout: PromptLayout,
    pub expand_mode: ExpandMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::vit_base()
    }
}

impl ModelConfig {
    /// ViT-B/16 backbone with 40 prompts per layer.
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            num_layers: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_ratio: 4.0,
            num_modalities: 3,
            prompt_length: 40,
            hidden_dim: 64,
            cd_intensity: 0.5,
            mask_ratio: 0.15,
            mmr_weight: 1.0,
            pixel_mean: 0.5,
            pixel_std: 0.5,
            shared_patch_embed: true,
            prompt_layout: PromptLayout::Full,
            expand_mode: ExpandMode::Replicate,
        }
    }

    /// Desk-scale model: 4 layers, width 128, 32×32 inputs.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 16,
            num_layers: 4,
            embed_dim: 128,
            num_heads: 4,
            prompt_length: 8,
            hidden_dim: 16,
            ..Self::vit_base()
        }
    }

    /// Smallest configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 16,
            num_layers: 2,
            embed_dim: 16,
            num_heads: 2,
            prompt_length: 4,
            hidden_dim: 4,
            ..Self::vit_base()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.prompt_length % 2 != 0 {
            return Err(ConfigError::OddPromptLength(self.prompt_length));
        }
        if !(0.0..=1.0 / 3.0 + 1e-12).contains(&self.mask_ratio) {
            return Err(ConfigError::MaskRatio(self.mask_ratio));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ConfigError::PatchGrid {
                image: self.image_size,
                patch: self.patch_size,
            });
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(ConfigError::Heads {
                dim: self.embed_dim,
                heads: self.num_heads,
            });
        }
        if !(0.0..=1.0).contains(&self.cd_intensity) {
            return Err(ConfigError::Theta(self.cd_intensity));
        }
        if self.num_modalities != 3 {
            return Err(ConfigError::Invalid(format!(
                "num_modalities must be 3 (RGB, depth, IR), got {}",
                self.num_modalities
            )));
        }
        if self.num_layers == 0 || self.embed_dim == 0 || self.in_channels == 0 {
            return Err(ConfigError::Invalid("empty architecture".into()));
        }
        if self.mmr_weight < 0.0 || !self.mmr_weight.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "mmr weight {} must be non-negative",
                self.mmr_weight
            )));
        }
        if !(self.pixel_std > 0.0) || !self.pixel_mean.is_finite() || !self.pixel_std.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "pixel normalization ({}, {}) needs a positive finite std",
                self.pixel_mean, self.pixel_std
            )));
        }
        if self.contextual_count() > 0 && self.hidden_dim == 0 {
            return Err(ConfigError::Invalid("hidden dim must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens_per_modality(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// CLS plus every modality's patch tokens.
    pub fn content_tokens(&self) -> usize {
        1 + self.num_modalities * self.tokens_per_modality()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn vanilla_count(&self) -> usize {
        match self.prompt_layout {
            PromptLayout::Full => self.prompt_length / 2,
            PromptLayout::VanillaOnly => self.prompt_length,
            PromptLayout::ContextualOnly => 0,
        }
    }

    pub fn contextual_count(&self) -> usize {
        match self.prompt_layout {
            PromptLayout::Full => self.prompt_length / 2,
            PromptLayout::VanillaOnly => 0,
            PromptLayout::ContextualOnly => self.prompt_length,
        }
    }

    /// Sequence length seen by every encoder layer.
    pub fn sequence_len(&self) -> usize {
        self.content_tokens() + self.vanilla_count() + self.contextual_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_token_arithmetic() {
        let c = ModelConfig::default();
        assert_eq!(c.content_tokens(), 589);
        assert_eq!(c.sequence_len(), 629);
        assert_eq!(ModelConfig::tiny().content_tokens(), 13);
        c.validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invariants_rejected() {
        let mut c = ModelConfig::tiny();
        c.prompt_length = 5;
        assert_eq!(c.validate(), Err(ConfigError::OddPromptLength(5)));
        let mut c = ModelConfig::tiny();
        c.mask_ratio = 0.4;
        assert!(matches!(c.validate(), Err(ConfigError::MaskRatio(_))));
        let mut c = ModelConfig::tiny();
        c.image_size = 30;
        assert!(matches!(c.validate(), Err(ConfigError::PatchGrid { .. })));
        let mut c = ModelConfig::tiny();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(ConfigError::Heads { .. })));
    }

    #[test]
    fn json_defaults_fill_missing_fields() {
        let c: ModelConfig = serde_json::from_str(r#"{"num_layers": 2}"#).unwrap();
        assert_eq!(c.num_layers, 2);
        assert_eq!(c.embed_dim, 768);
    }
}
