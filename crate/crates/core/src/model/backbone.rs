//! ViT backbone weights and the plain (non-differentiable) forward ops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::params::{ParamId, ParamSpec, ParamStore};
use crate::config::ModelConfig;
use crate::error::{ConfigError, ModelError};
use crate::flexdata::{DenseInput, Modality};
use crate::scalar::{gelu, Scalar};
use crate::tensor::{layer_norm, softmax_rows, Tensor};

pub const NUM_CLASSES: usize = 2;
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerIds {
    pub norm1_w: ParamId,
    pub norm1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub norm2_w: ParamId,
    pub norm2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneIds {
    /// One embedder when shared, otherwise one per modality.
    pub patch_w: Vec<ParamId>,
    pub patch_b: Vec<ParamId>,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerIds>,
    pub norm_w: ParamId,
    pub norm_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Token sequence `[CLS | RGB | D | IR]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    pub tokens: Tensor<T>,
    pub tokens_per_modality: usize,
    pub modalities: usize,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn cls(&self) -> Tensor<T> {
        self.tokens.slice_rows(0, 1)
    }

    pub fn modality_block(&self, m: Modality) -> Tensor<T> {
        let n = self.tokens_per_modality;
        let start = 1 + m.index() * n;
        self.tokens.slice_rows(start, start + n)
    }
}

fn patch_param_names(cfg: &ModelConfig) -> Vec<(String, String)> {
    if cfg.shared_patch_embed {
        vec![("patch_embed.weight".into(), "patch_embed.bias".into())]
    } else {
        Modality::ALL
            .iter()
            .map(|m| {
                (
                    format!("patch_embed.{}.weight", m.name()),
                    format!("patch_embed.{}.bias", m.name()),
                )
            })
            .collect()
    }
}

/// Every backbone parameter (including the head) in storage order.
pub fn backbone_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let mut specs = Vec::new();
    for (w, b) in patch_param_names(cfg) {
        specs.push(ParamSpec::new(w, cfg.patch_dim(), d));
        specs.push(ParamSpec::new(b, 1, d));
    }
    specs.push(ParamSpec::new("cls_token", 1, d));
    specs.push(ParamSpec::new("pos_embed", 1 + cfg.tokens_per_modality(), d));
    for i in 0..cfg.num_layers {
        let p = format!("blocks.{i}");
        specs.push(ParamSpec::new(format!("{p}.norm1.weight"), 1, d));
        specs.push(ParamSpec::new(format!("{p}.norm1.bias"), 1, d));
        specs.push(ParamSpec::new(format!("{p}.attn.qkv.weight"), d, 3 * d));
        specs.push(ParamSpec::new(format!("{p}.attn.qkv.bias"), 1, 3 * d));
        specs.push(ParamSpec::new(format!("{p}.attn.proj.weight"), d, d));
        specs.push(ParamSpec::new(format!("{p}.attn.proj.bias"), 1, d));
        specs.push(ParamSpec::new(format!("{p}.norm2.weight"), 1, d));
        specs.push(ParamSpec::new(format!("{p}.norm2.bias"), 1, d));
        specs.push(ParamSpec::new(format!("{p}.mlp.fc1.weight"), d, h));
        specs.push(ParamSpec::new(format!("{p}.mlp.fc1.bias"), 1, h));
        specs.push(ParamSpec::new(format!("{p}.mlp.fc2.weight"), h, d));
        specs.push(ParamSpec::new(format!("{p}.mlp.fc2.bias"), 1, d));
    }
    specs.push(ParamSpec::new("norm.weight", 1, d));
    specs.push(ParamSpec::new("norm.bias", 1, d));
    specs.push(ParamSpec::new("head.weight", d, NUM_CLASSES));
    specs.push(ParamSpec::new("head.bias", 1, NUM_CLASSES));
    specs
}

fn is_head(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    ids: BackboneIds,
}

impl<T: Scalar> BackboneWeights<T> {
    /// Zero tensors for every parameter; all groups trainable.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        for s in backbone_specs(cfg) {
            store.insert(s.name, Tensor::zeros(s.rows, s.cols), true);
        }
        let ids = resolve_ids(cfg, &store);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            ids,
        })
    }

    /// Deterministic random initialization from `seed`. The head starts at zero.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut w = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in w.store.iter_mut() {
            let (rows, cols) = p.tensor.shape();
            let name = p.name.as_str();
            p.tensor = if name.ends_with("norm1.weight")
                || name.ends_with("norm2.weight")
                || name == "norm.weight"
            {
                Tensor::full(rows, cols, T::one())
            } else if is_head(name) || name.ends_with(".bias") {
                Tensor::zeros(rows, cols)
            } else if name == "cls_token" || name == "pos_embed" {
                Tensor::uniform(rows, cols, 0.02 * 3f64.sqrt(), &mut rng)
            } else {
                Tensor::uniform(rows, cols, (3.0 / rows as f64).sqrt(), &mut rng)
            };
        }
        Ok(w)
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

    pub fn ids(&self) -> &BackboneIds {
        &self.ids
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    /// Freezes every group except the classification head.
    pub fn freeze(&mut self) {
        for p in self.store.iter_mut() {
            p.trainable = is_head(&p.name);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.store
            .iter()
            .all(|p| p.trainable == is_head(&p.name))
    }

    /// SHA-256 over names, shapes and bytes of every non-head parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.store.iter().filter(|p| !is_head(&p.name)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.tensor.rows() as u64).to_le_bytes());
            h.update((p.tensor.cols() as u64).to_le_bytes());
            h.update(T::to_le_bytes_vec(p.tensor.data()));
        }
        hex::encode(h.finalize())
    }

    pub fn patch_ids(&self, m: Modality) -> (ParamId, ParamId) {
        let i = if self.cfg.shared_patch_embed { 0 } else { m.index() };
        (self.ids.patch_w[i], self.ids.patch_b[i])
    }

    /// Patch-embeds each modality plane with the positional table re-applied
    /// per block and prepends the class token.
    pub fn patch_embed(&self, input: &DenseInput) -> Result<TokenBatch<T>, ModelError> {
        let pos = self.get(self.ids.pos_embed);
        let n = self.cfg.tokens_per_modality();
        let pos_vis = pos.slice_rows(1, n + 1);
        let cls = self.get(self.ids.cls_token).add(&pos.slice_rows(0, 1));
        let mut blocks = vec![cls];
        for m in Modality::ALL {
            let patches = extract_patches::<T>(input, &self.cfg, m)?;
            let (w, b) = self.patch_ids(m);
            let tok = patches.linear(self.get(w), Some(self.get(b))).add(&pos_vis);
            blocks.push(tok);
        }
        let refs: Vec<&Tensor<T>> = blocks.iter().collect();
        Ok(TokenBatch {
            tokens: Tensor::concat_rows(&refs),
            tokens_per_modality: n,
            modalities: self.cfg.num_modalities,
        })
    }

    /// Pre-norm transformer block `layer` (1-based).
    pub fn encoder_layer_forward(&self, x: &Tensor<T>, layer: usize) -> Result<Tensor<T>, ModelError> {
        let l = self.layer_ids(layer)?;
        if x.cols() != self.cfg.embed_dim {
            return Err(ConfigError::Invalid(format!(
                "token dim {} != embed dim {}",
                x.cols(),
                self.cfg.embed_dim
            ))
            .into());
        }
        let d = self.cfg.embed_dim;
        let hd = self.cfg.head_dim();
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (h, _) = layer_norm(x, self.get(l.norm1_w), self.get(l.norm1_b));
        let qkv = h.linear(self.get(l.qkv_w), Some(self.get(l.qkv_b)));
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for head in 0..self.cfg.num_heads {
            let q = qkv.slice_cols(head * hd, (head + 1) * hd);
            let k = qkv.slice_cols(d + head * hd, d + (head + 1) * hd);
            let v = qkv.slice_cols(2 * d + head * hd, 2 * d + (head + 1) * hd);
            let a = softmax_rows(&q.matmul_t(&k).scale(scale));
            heads.push(a.matmul(&v));
        }
        let refs: Vec<&Tensor<T>> = heads.iter().collect();
        let attn = Tensor::concat_cols(&refs).linear(self.get(l.proj_w), Some(self.get(l.proj_b)));
        let x = x.add(&attn);
        let (h2, _) = layer_norm(&x, self.get(l.norm2_w), self.get(l.norm2_b));
        let m = h2
            .linear(self.get(l.fc1_w), Some(self.get(l.fc1_b)))
            .map(gelu)
            .linear(self.get(l.fc2_w), Some(self.get(l.fc2_b)));
        Ok(x.add(&m))
    }

    pub fn layer_ids(&self, layer: usize) -> Result<&LayerIds, ModelError> {
        if layer == 0 || layer > self.cfg.num_layers {
            return Err(ModelError::LayerOutOfRange {
                layer,
                layers: self.cfg.num_layers,
            });
        }
        Ok(&self.ids.layers[layer - 1])
    }

    /// Final layer norm applied to the class token.
    pub fn final_norm(&self, cls: &Tensor<T>) -> Tensor<T> {
        layer_norm(cls, self.get(self.ids.norm_w), self.get(self.ids.norm_b)).0
    }

    /// Head logits `[spoof, live]` for a `1×d` embedding.
    pub fn classify(&self, cls_embedding: &Tensor<T>) -> Tensor<T> {
        cls_embedding.linear(self.get(self.ids.head_w), Some(self.get(self.ids.head_b)))
    }

    /// Unprompted multimodal ViT: patch embed, all layers, final norm, head.
    pub fn vanilla_forward(&self, input: &DenseInput) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut x = self.patch_embed(input)?.tokens;
        for layer in 1..=self.cfg.num_layers {
            x = self.encoder_layer_forward(&x, layer)?;
        }
        let emb = self.final_norm(&x.slice_rows(0, 1));
        Ok((self.classify(&emb), emb))
    }
}

fn resolve_ids<T: Scalar>(cfg: &ModelConfig, s: &ParamStore<T>) -> BackboneIds {
    let id = |n: &str| s.id(n).unwrap_or_else(|| panic!("missing {n}"));
    let names = patch_param_names(cfg);
    BackboneIds {
        patch_w: names.iter().map(|(w, _)| id(w)).collect(),
        patch_b: names.iter().map(|(_, b)| id(b)).collect(),
        cls_token: id("cls_token"),
        pos_embed: id("pos_embed"),
        layers: (0..cfg.num_layers)
            .map(|i| {
                let f = |suffix: &str| id(&format!("blocks.{i}.{suffix}"));
                LayerIds {
                    norm1_w: f("norm1.weight"),
                    norm1_b: f("norm1.bias"),
                    qkv_w: f("attn.qkv.weight"),
                    qkv_b: f("attn.qkv.bias"),
                    proj_w: f("attn.proj.weight"),
                    proj_b: f("attn.proj.bias"),
                    norm2_w: f("norm2.weight"),
                    norm2_b: f("norm2.bias"),
                    fc1_w: f("mlp.fc1.weight"),
                    fc1_b: f("mlp.fc1.bias"),
                    fc2_w: f("mlp.fc2.weight"),
                    fc2_b: f("mlp.fc2.bias"),
                }
            })
            .collect(),
        norm_w: id("norm.weight"),
        norm_b: id("norm.bias"),
        head_w: id("head.weight"),
        head_b: id("head.bias"),
    }
}

/// `(grid²) × (C·P·P)` patch matrix; columns ordered channel, row, column.
/// Planes with fewer channels than the embedder are replicated; pixels are
/// normalized and absent planes give an all-zero matrix.
pub fn extract_patches<T: Scalar>(
    input: &DenseInput,
    cfg: &ModelConfig,
    m: Modality,
) -> Result<Tensor<T>, ConfigError> {
    let plane = input.plane(m);
    let size = cfg.image_size;
    if plane.height != size || plane.width != size || plane.channels == 0 {
        return Err(ConfigError::PlaneSize {
            name: m.name(),
            got_h: plane.height,
            got_w: plane.width,
            want: size,
        });
    }
    let p = cfg.patch_size;
    let side = cfg.grid_side();
    let c_in = cfg.in_channels;
    if !input.is_present(m) {
        return Ok(Tensor::zeros(side * side, cfg.patch_dim()));
    }
    let (mean, inv_std) = (cfg.pixel_mean, 1.0 / cfg.pixel_std);
    Ok(Tensor::from_fn(side * side, cfg.patch_dim(), |row, col| {
        let (py, px) = (row / side, row % side);
        let c = col / (p * p);
        let (ky, kx) = ((col / p) % p, col % p);
        let src_c = c.min(plane.channels - 1);
        debug_assert!(c < c_in);
        T::lit((plane.at(src_c, py * p + ky, px * p + kx) as f64 - mean) * inv_std)
    }))
}
