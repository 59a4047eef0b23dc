#![allow(dead_code)]

pub mod degenerate;
pub mod grad;
pub mod reference;

use flexprompt_core::flexdata::{synth_dataset, zero_fill, DenseInput, Label, ModalityAvailability};
use flexprompt_core::{ModelConfig, Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random frozen model with a non-zero head so every prompt gets gradient.
pub fn model_with_head(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::random(cfg, seed).unwrap();
    let ids = m.backbone.ids().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let store = m.backbone.store_mut();
    *store.get_mut(ids.head_w) = Tensor::uniform(cfg.embed_dim, 2, 0.5, &mut rng);
    *store.get_mut(ids.head_b) = Tensor::uniform(1, 2, 0.1, &mut rng);
    m
}

/// One synthetic sample with every modality, plus its label.
pub fn complete_input(cfg: &ModelConfig, seed: u64, index: usize) -> (DenseInput, Label) {
    let s = synth_dataset(index + 1, cfg.image_size, seed).swap_remove(index);
    (zero_fill(&s, ModalityAvailability::COMPLETE), s.label)
}

/// Cross-entropy from logits, written out directly.
pub fn cross_entropy(logits: &Tensor<f64>, class: usize) -> f64 {
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[class]
}

pub fn neg_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    -dot / (na * nb)
}
