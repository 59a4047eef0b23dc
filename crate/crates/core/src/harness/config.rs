use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, PromptLayout};
use crate::error::HarnessError;
use crate::flexdata::{ProtocolSetting, ProtocolSpec};
use crate::metrics::ThresholdRule;
use crate::model::checkpoint::canonical_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Generated splits; dev and test use `seed + 1` and `seed + 2`.
    Synthetic {
        train: usize,
        dev: usize,
        test: usize,
        seed: u64,
    },
    Directory {
        root: PathBuf,
        manifest: PathBuf,
        #[serde(default = "passthrough")]
        ir_preprocess: String,
    },
}

fn passthrough() -> String {
    "passthrough".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSource {
    /// Seeded random weights standing in for a pretrained encoder.
    Random { seed: u64 },
    /// Native archive or timm-layout safetensors.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 5e-3,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectRule {
    /// Epoch with the lowest dev ACER; earliest wins ties.
    #[default]
    Best,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantFlags {
    pub vanilla_prompt_only: bool,
    pub contextual_only: bool,
    pub mmr: bool,
    pub mmr_no_stop_gradient: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self {
            vanilla_prompt_only: false,
            contextual_only: false,
            mmr: true,
            mmr_no_stop_gradient: false,
        }
    }
}

impl VariantFlags {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.vanilla_prompt_only && self.contextual_only {
            return Err(HarnessError::Invalid(
                "vanilla_prompt_only and contextual_only are exclusive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedVariant {
    pub name: String,
    #[serde(flatten)]
    pub flags: VariantFlags,
}

fn default_variants() -> Vec<NamedVariant> {
    vec![
        NamedVariant {
            name: "mmr".into(),
            flags: VariantFlags::default(),
        },
        NamedVariant {
            name: "no_mmr".into(),
            flags: VariantFlags {
                mmr: false,
                ..VariantFlags::default()
            },
        },
    ]
}

fn default_settings() -> Vec<ProtocolSetting> {
    ProtocolSetting::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub settings: Vec<ProtocolSetting>,
    pub variants: Vec<NamedVariant>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            settings: default_settings(),
            variants: default_variants(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// Applied to every split with split-derived seeds.
    pub protocol: ProtocolSpec,
    /// Optional per-split replacements for `protocol`.
    #[serde(default)]
    pub protocol_overrides: BTreeMap<String, ProtocolSpec>,
    pub dataset: DatasetSource,
    pub backbone: BackboneSource,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Seeds prompt initialization, data order and mask sampling.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub variant: VariantFlags,
    #[serde(default)]
    pub select: SelectRule,
    #[serde(default)]
    pub threshold: ThresholdRule,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub sweep: SweepConfig,
}

pub const TRAIN: &str = "train";
pub const DEV: &str = "dev";
pub const TEST: &str = "test";
pub const SPLITS: [&str; 3] = [TRAIN, DEV, TEST];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::from((path.to_path_buf(), e)))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn canonical(&self) -> String {
        canonical_json(&self.to_value())
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.canonical()).map_err(|e| HarnessError::from((path.to_path_buf(), e)))
    }

    pub fn protocol_for(&self, split: &str) -> ProtocolSpec {
        self.protocol_overrides
            .get(split)
            .copied()
            .unwrap_or_else(|| self.protocol.for_split(split))
    }

    /// Model config with the variant's prompt layout applied.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.variant.vanilla_prompt_only {
            m.prompt_layout = PromptLayout::VanillaOnly;
        } else if self.variant.contextual_only {
            m.prompt_layout = PromptLayout::ContextualOnly;
        }
        m
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.variant.validate()?;
        self.resolved_model().validate()?;
        crate::mmr::check_mask_ratio(self.model.mask_ratio)?;
        if self.optimizer.batch_size == 0 {
            return Err(HarnessError::Invalid("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err(HarnessError::Invalid("lr must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.protocol.alpha) {
            return Err(crate::error::DataError::Alpha(self.protocol.alpha).into());
        }
        if self.model.mmr_weight < 0.0 {
            return Err(HarnessError::Invalid("mmr_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical config with the output directory blanked.
    pub fn cell_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.canonical().as_bytes()))
    }

    /// Small synthetic experiment on the toy model.
    pub fn toy_synthetic(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: ModelConfig::toy(),
            protocol: ProtocolSpec::new(ProtocolSetting::RgbdMissD, 0.7, 0),
            protocol_overrides: BTreeMap::new(),
            dataset: DatasetSource::Synthetic {
                train: 240,
                dev: 120,
                test: 200,
                seed: 1000,
            },
            backbone: BackboneSource::Random { seed: 7 },
            optimizer: OptimizerConfig {
                lr: 1e-3,
                weight_decay: 5e-3,
                batch_size: 16,
                ..OptimizerConfig::default()
            },
            epochs: 15,
            seed: 0,
            output_dir: output_dir.into(),
            variant: VariantFlags::default(),
            select: SelectRule::Best,
            threshold: ThresholdRule::Eer,
            precision: Precision::F32,
            sweep: SweepConfig::default(),
        }
    }
}

/// Independent stream seed for `tag`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
