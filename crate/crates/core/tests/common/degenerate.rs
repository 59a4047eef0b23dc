//! Inputs and comparisons for the collapse-to-simpler-model checks.

use std::path::Path;

use super::complete_input;
use super::reference::reference_forward;
use flexprompt_core::flexdata::{DenseInput, ModalityAvailability, ProtocolSetting, ProtocolSpec};
use flexprompt_core::harness::{DatasetSource, ExperimentConfig};
use flexprompt_core::prompt::prompted_forward;
use flexprompt_core::{Model, ModelConfig};

pub type Rows = Vec<Vec<f64>>;

/// One sample under each availability pattern.
pub fn inputs(cfg: &ModelConfig) -> Vec<DenseInput> {
    [
        ModalityAvailability::COMPLETE,
        ModalityAvailability::RGB_D,
        ModalityAvailability::RGB_IR,
        ModalityAvailability::RGB_ONLY,
    ]
    .into_iter()
    .enumerate()
    .map(|(i, avail)| complete_input(cfg, 21, i).0.masked(avail))
    .collect()
}

/// Largest gap between the library forward and the reference ViT fed `prompts`.
pub fn reference_gap(m: &Model<f64>, input: &DenseInput, prompts: &[Rows]) -> f64 {
    let out = prompted_forward(m, input).unwrap();
    let (logits, emb) = reference_forward(m, input, prompts);
    out.logits
        .data()
        .iter()
        .zip(&logits)
        .chain(out.embedding.data().iter().zip(&emb))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn vanilla_rows(m: &Model<f64>, layer: usize) -> Rows {
    let t = m.prompts.store().by_name(&format!("prompts.{layer}.vanilla")).unwrap();
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Per-layer VPT-deep prompts: the vanilla rows, then zero rows for every
/// contextual slot.
pub fn vpt_deep_prompts(m: &Model<f64>) -> Vec<Rows> {
    let cfg = m.config();
    (0..cfg.num_layers)
        .map(|i| {
            let mut rows = vanilla_rows(m, i);
            rows.extend(std::iter::repeat(vec![0.0; cfg.embed_dim]).take(cfg.contextual_count()));
            rows
        })
        .collect()
}

/// Every parameter as raw bits, prompts then backbone.
pub fn weights(m: &Model<f32>) -> Vec<Vec<u32>> {
    m.prompts
        .store()
        .iter()
        .chain(m.backbone.store().iter())
        .map(|p| p.tensor.data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

/// A two-epoch run on the tiny model.
pub fn small_run(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy_synthetic(dir);
    cfg.model = ModelConfig::tiny();
    cfg.protocol = ProtocolSpec::new(ProtocolSetting::RgbdirLimited, 0.3, 2);
    cfg.dataset = DatasetSource::Synthetic {
        train: 32,
        dev: 12,
        test: 12,
        seed: 40,
    };
    cfg.optimizer.batch_size = 8;
    cfg.epochs = 2;
    cfg
}
