use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExpandMode, ModelConfig};
use crate::error::ModelError;
use crate::model::params::{ParamId, ParamSpec, ParamStore};
use crate::prompt::cdc::KERNEL_TAPS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextIds {
    pub base: ParamId,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub cdc_w: ParamId,
    pub cdc_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub gain: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLayerIds {
    pub vanilla: Option<ParamId>,
    pub context: Option<ContextIds>,
}

pub fn prompt_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim;
    let v = cfg.vanilla_count();
    let c = cfg.contextual_count();
    let mut specs = Vec::new();
    for i in 0..cfg.num_layers {
        let p = format!("prompts.{i}");
        if v > 0 {
            specs.push(ParamSpec::new(format!("{p}.vanilla"), v, d));
        }
        if c > 0 {
            specs.push(ParamSpec::new(format!("{p}.base"), c, d));
            specs.push(ParamSpec::new(format!("{p}.down.weight"), d, h));
            specs.push(ParamSpec::new(format!("{p}.down.bias"), 1, h));
            specs.push(ParamSpec::new(
                format!("{p}.cdc.weight"),
                KERNEL_TAPS * cfg.num_modalities * h,
                h,
            ));
            specs.push(ParamSpec::new(format!("{p}.cdc.bias"), 1, h));
            specs.push(ParamSpec::new(format!("{p}.up.weight"), h, d));
            specs.push(ParamSpec::new(format!("{p}.up.bias"), 1, d));
            if cfg.expand_mode == ExpandMode::LearnedGain {
                specs.push(ParamSpec::new(format!("{p}.expand.gain"), c, 1));
            }
        }
    }
    specs
}

/// Vanilla prompts, base prompts and per-layer context pipelines.
/// Every entry is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    layers: Vec<PromptLayerIds>,
}

impl<T: Scalar> PromptState<T> {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        for s in prompt_specs(cfg) {
            store.insert(s.name, Tensor::zeros(s.rows, s.cols), true);
        }
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let id = |s: &str| store.id(&format!("prompts.{i}.{s}"));
                PromptLayerIds {
                    vanilla: id("vanilla"),
                    context: id("base").map(|base| ContextIds {
                        base,
                        down_w: id("down.weight").unwrap(),
                        down_b: id("down.bias").unwrap(),
                        cdc_w: id("cdc.weight").unwrap(),
                        cdc_b: id("cdc.bias").unwrap(),
                        up_w: id("up.weight").unwrap(),
                        up_b: id("up.bias").unwrap(),
                        gain: id("expand.gain"),
                    }),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            store,
            layers,
        })
    }

    /// Prompts uniform in `±1/√d`, convolution weights uniform in
    /// `±1/√fan_in`, biases zero, expansion gains one.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut s = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt_scale = 1.0 / (cfg.embed_dim as f64).sqrt();
        for p in s.store.iter_mut() {
            let (rows, cols) = p.tensor.shape();
            let n = p.name.as_str();
            p.tensor = if n.ends_with(".vanilla") || n.ends_with(".base") {
                Tensor::uniform(rows, cols, prompt_scale, &mut rng)
            } else if n.ends_with(".gain") {
                Tensor::full(rows, cols, T::one())
            } else if n.ends_with(".bias") {
                Tensor::zeros(rows, cols)
            } else {
                Tensor::uniform(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng)
            };
        }
        Ok(s)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layer(&self, i: usize) -> &PromptLayerIds {
        &self.layers[i]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    pub fn is_finite(&self) -> bool {
        self.store.iter().all(|p| p.tensor.is_finite())
    }

    /// Zeroes base prompts and every context-pipeline weight.
    pub fn zero_contextual(&mut self) {
        for p in self.store.iter_mut() {
            if !p.name.ends_with(".vanilla") {
                p.tensor = Tensor::zeros(p.tensor.rows(), p.tensor.cols());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_shapes_for_full_layout() {
        let cfg = ModelConfig::tiny();
        let specs = prompt_specs(&cfg);
        // vanilla + base + 6 conv tensors per layer
        assert_eq!(specs.len(), 2 * 8);
        let cdc = specs.iter().find(|s| s.name == "prompts.0.cdc.weight").unwrap();
        assert_eq!((cdc.rows, cdc.cols), (9 * 3 * 4, 4));
        let s = PromptState::<f64>::random(&cfg, 3).unwrap();
        assert!(s.store().iter().all(|p| p.trainable));
        assert!(s.layer(1).vanilla.is_some() && s.layer(1).context.is_some());
    }

    #[test]
    fn layouts_change_prompt_families() {
        let mut cfg = ModelConfig::tiny();
        cfg.prompt_layout = crate::config::PromptLayout::VanillaOnly;
        let s = PromptState::<f32>::zeros(&cfg).unwrap();
        assert!(s.layer(0).context.is_none());
        assert_eq!(s.get(s.layer(0).vanilla.unwrap()).rows(), 4);
        cfg.prompt_length = 0;
        assert!(PromptState::<f32>::zeros(&cfg).unwrap().store().is_empty());
    }
}
