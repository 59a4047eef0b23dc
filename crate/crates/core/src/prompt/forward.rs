//! Deep-prompted multimodal forward pass.
//!
//! Layer `i` sees `[CLS, visual, vanilla_i, contextual_i]`. Outputs at prompt
//! positions are dropped and fresh prompts are injected before the next
//! layer. The contextual block is
//!
//! ```text
//! rc_1 = base_1 + expand(ctx_1)
//! rc_i = base_i + expand(ctx_i) + rc_{i-1}
//! ctx_i = up(GAP(CDC(concat[down(RGB), down(D), down(IR)])))
//! ```
//!
//! where `ctx_i` is computed from the visual tokens entering layer `i`.

use crate::autograd::{Graph, Var};
use crate::config::{ExpandMode, ModelConfig};
use crate::error::{ModelError, PromptError};
use crate::flexdata::{DenseInput, Modality};
use crate::model::backbone::{extract_patches, BackboneWeights};
use crate::model::Model;
use crate::prompt::state::{ContextIds, PromptState};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, Tensor};

/// Graph leaves for every parameter, indexed like the owning stores.
#[derive(Debug, Clone)]
pub struct ModelLeaves {
    pub backbone: Vec<Var>,
    pub prompts: Vec<Var>,
}

impl ModelLeaves {
    pub fn new<'a, T: Scalar>(
        g: &mut Graph<'a, T>,
        backbone: &'a BackboneWeights<T>,
        prompts: &'a PromptState<T>,
        track_grad: bool,
    ) -> Self {
        let backbone = backbone
            .store()
            .iter()
            .map(|p| g.leaf(&p.tensor, track_grad && p.trainable))
            .collect();
        let prompts = prompts
            .store()
            .iter()
            .map(|p| g.leaf(&p.tensor, track_grad && p.trainable))
            .collect();
        Self { backbone, prompts }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub logits: Var,
    /// Final-norm class token, the head input.
    pub embedding: Var,
    pub leaves: ModelLeaves,
    /// Full per-layer output sequences, prompt positions included.
    pub layer_outputs: Vec<Var>,
    pub contexts: Vec<Var>,
    pub residual_prompts: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub embedding: Tensor<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Softmax probability of the live class.
    pub fn score(&self) -> T {
        softmax_rows(&self.logits).get(0, 1)
    }
}

fn patch_embed_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    bb: &'a BackboneWeights<T>,
    lv: &ModelLeaves,
    input: &DenseInput,
) -> Result<Var, ModelError> {
    let cfg = bb.config();
    let n = cfg.tokens_per_modality();
    let ids = bb.ids();
    let pos = lv.backbone[ids.pos_embed.0];
    let pos_cls = g.slice_rows(pos, 0, 1);
    let pos_vis = g.slice_rows(pos, 1, n + 1);
    let cls = g.add(lv.backbone[ids.cls_token.0], pos_cls);
    let mut parts = vec![cls];
    for m in Modality::ALL {
        let patches = g.constant(extract_patches::<T>(input, cfg, m)?);
        let (w, b) = bb.patch_ids(m);
        let tok = g.linear(patches, lv.backbone[w.0], Some(lv.backbone[b.0]));
        parts.push(g.add(tok, pos_vis));
    }
    Ok(g.concat_rows(&parts))
}

fn layer_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    bb: &'a BackboneWeights<T>,
    lv: &ModelLeaves,
    x: Var,
    layer: usize,
) -> Result<Var, ModelError> {
    let cfg = bb.config();
    let l = bb.layer_ids(layer)?;
    let p = |id: crate::model::params::ParamId| lv.backbone[id.0];
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let h = g.layer_norm(x, p(l.norm1_w), p(l.norm1_b));
    let qkv = g.linear(h, p(l.qkv_w), Some(p(l.qkv_b)));
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let q = g.slice_cols(qkv, head * hd, (head + 1) * hd);
        let k = g.slice_cols(qkv, d + head * hd, d + (head + 1) * hd);
        let v = g.slice_cols(qkv, 2 * d + head * hd, 2 * d + (head + 1) * hd);
        let s = g.matmul_nt(q, k);
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        heads.push(g.matmul(a, v));
    }
    let cat = g.concat_cols(&heads);
    let attn = g.linear(cat, p(l.proj_w), Some(p(l.proj_b)));
    let x = g.add(x, attn);
    let h2 = g.layer_norm(x, p(l.norm2_w), p(l.norm2_b));
    let m = g.linear(h2, p(l.fc1_w), Some(p(l.fc1_b)));
    let m = g.gelu(m);
    let m = g.linear(m, p(l.fc2_w), Some(p(l.fc2_b)));
    Ok(g.add(x, m))
}

/// Pooled multimodal central difference context (`1×d`) from the
/// `M·n × d` visual tokens.
pub(crate) fn context_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    lv: &ModelLeaves,
    ids: &ContextIds,
    vis: Var,
) -> Result<Var, PromptError> {
    let total = g.value(vis).rows();
    let n = total / cfg.num_modalities;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n * cfg.num_modalities != total {
        return Err(PromptError::NonSquare(n));
    }
    let p = |id: crate::model::params::ParamId| lv.prompts[id.0];
    let mut squeezed = Vec::with_capacity(cfg.num_modalities);
    for m in 0..cfg.num_modalities {
        let block = g.slice_rows(vis, m * n, (m + 1) * n);
        let down = g.linear(block, p(ids.down_w), Some(p(ids.down_b)));
        squeezed.push(g.gelu(down));
    }
    let cat = g.concat_cols(&squeezed);
    let theta = T::lit(cfg.cd_intensity);
    let conv = g.cdc(cat, p(ids.cdc_w), p(ids.cdc_b), theta, side, side);
    let pooled = g.mean_rows(conv);
    let up = g.linear(pooled, p(ids.up_w), Some(p(ids.up_b)));
    Ok(g.gelu(up))
}

pub(crate) fn expand_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    ctx: Var,
    count: usize,
    gain: Option<Var>,
) -> Var {
    match gain {
        Some(gain) => g.matmul(gain, ctx),
        None => g.repeat_rows(ctx, count),
    }
}

/// Builds the prompted forward graph. With `track_grad == false` no leaf
/// requires a gradient, which is the no-gradient inference mode.
pub fn build_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    model: &'a Model<T>,
    input: &DenseInput,
    track_grad: bool,
) -> Result<ForwardGraph, ModelError> {
    let bb = &model.backbone;
    let prompts = &model.prompts;
    let cfg = bb.config();
    let lv = ModelLeaves::new(g, bb, prompts, track_grad);
    let content = cfg.content_tokens();
    let mut x = patch_embed_graph(g, bb, &lv, input)?;
    let mut carry: Option<Var> = None;
    let mut layer_outputs = Vec::with_capacity(cfg.num_layers);
    let mut contexts = Vec::new();
    let mut residual_prompts = Vec::new();
    for i in 0..cfg.num_layers {
        let ids = prompts.layer(i);
        let mut parts = vec![x];
        if let Some(v) = ids.vanilla {
            parts.push(lv.prompts[v.0]);
        }
        if let Some(c) = &ids.context {
            let vis = g.slice_rows(x, 1, content);
            let ctx = context_graph(g, cfg, &lv, c, vis)?;
            let gain = match cfg.expand_mode {
                ExpandMode::LearnedGain => c.gain.map(|id| lv.prompts[id.0]),
                ExpandMode::Replicate => None,
            };
            let expanded = expand_graph(g, ctx, cfg.contextual_count(), gain);
            let mut rc = g.add(lv.prompts[c.base.0], expanded);
            if let Some(prev) = carry {
                rc = g.add(rc, prev);
            }
            carry = Some(rc);
            contexts.push(ctx);
            residual_prompts.push(rc);
            parts.push(rc);
        }
        let seq = if parts.len() == 1 {
            x
        } else {
            g.concat_rows(&parts)
        };
        let out = layer_graph(g, bb, &lv, seq, i + 1)?;
        layer_outputs.push(out);
        x = if g.value(out).rows() == content {
            out
        } else {
            g.slice_rows(out, 0, content)
        };
    }
    let ids = bb.ids();
    let cls = g.slice_rows(x, 0, 1);
    let embedding = g.layer_norm(cls, lv.backbone[ids.norm_w.0], lv.backbone[ids.norm_b.0]);
    let logits = g.linear(
        embedding,
        lv.backbone[ids.head_w.0],
        Some(lv.backbone[ids.head_b.0]),
    );
    Ok(ForwardGraph {
        logits,
        embedding,
        leaves: lv,
        layer_outputs,
        contexts,
        residual_prompts,
    })
}

/// Logits and class embedding without gradient tracking.
pub fn prompted_forward<T: Scalar>(
    model: &Model<T>,
    input: &DenseInput,
) -> Result<ForwardOutput<T>, ModelError> {
    let mut g = Graph::new();
    let fg = build_forward(&mut g, model, input, false)?;
    Ok(ForwardOutput {
        logits: g.value(fg.logits).clone(),
        embedding: g.value(fg.embedding).clone(),
    })
}

/// Multimodal central difference context for 1-based `layer`.
pub fn compute_cd_context<T: Scalar>(
    visual_tokens: &Tensor<T>,
    prompts: &PromptState<T>,
    layer: usize,
) -> Result<Tensor<T>, ModelError> {
    let cfg = prompts.config();
    if layer == 0 || layer > cfg.num_layers {
        return Err(ModelError::LayerOutOfRange {
            layer,
            layers: cfg.num_layers,
        });
    }
    let ids = prompts.layer(layer - 1).context.as_ref().ok_or_else(|| {
        ModelError::MissingParam(format!("prompts.{}.base", layer - 1))
    })?;
    if visual_tokens.cols() != cfg.embed_dim {
        return Err(PromptError::ChannelMismatch {
            expected: cfg.embed_dim,
            got: visual_tokens.cols(),
        }
        .into());
    }
    let mut g = Graph::new();
    let prompts_leaves = prompts
        .store()
        .iter()
        .map(|p| g.leaf(&p.tensor, false))
        .collect();
    let lv = ModelLeaves {
        backbone: Vec::new(),
        prompts: prompts_leaves,
    };
    let vis = g.leaf(visual_tokens, false);
    let ctx = context_graph(&mut g, cfg, &lv, ids, vis)?;
    Ok(g.value(ctx).clone())
}

/// Replicates a `1×d` context into `count` identical rows.
pub fn expand<T: Scalar>(context: &Tensor<T>, count: usize) -> Tensor<T> {
    context.repeat_rows(count)
}

/// One step of the residual contextual prompt recursion (1-based `layer`).
pub fn compose_residual_prompt<T: Scalar>(
    base: &Tensor<T>,
    context: &Tensor<T>,
    carry: Option<&Tensor<T>>,
    layer: usize,
) -> Result<Tensor<T>, PromptError> {
    match (layer, carry) {
        (0, _) => Err(PromptError::Carry("layer index is 1-based", 0)),
        (1, Some(_)) => Err(PromptError::Carry("present", 1)),
        (i, None) if i >= 2 => Err(PromptError::Carry("absent", i)),
        _ => {
            if context.cols() != base.cols() {
                return Err(PromptError::ChannelMismatch {
                    expected: base.cols(),
                    got: context.cols(),
                });
            }
            let rc = base.add(&expand(context, base.rows()));
            Ok(match carry {
                Some(c) => rc.add(c),
                None => rc,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expand_replicates() {
        let v = Tensor::row_vector(vec![1.0f64, -2.0, 3.0]);
        assert_eq!(expand(&v, 1), v);
        let e = expand(&v, 20);
        assert_eq!(e.rows(), 20);
        for r in 0..20 {
            assert_eq!(e.row(r), v.row(0));
        }
        assert!(expand(&Tensor::<f64>::zeros(1, 3), 20).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn residual_composition_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Tensor::<f64>::uniform(1, 4, 1.0, &mut rng);
        let zero_base = Tensor::zeros(3, 4);
        let rc1 = compose_residual_prompt(&zero_base, &v, None, 1).unwrap();
        assert_eq!(rc1, expand(&v, 3));

        let carry = Tensor::uniform(3, 4, 1.0, &mut rng);
        let rc2 = compose_residual_prompt(&zero_base, &Tensor::zeros(1, 4), Some(&carry), 2).unwrap();
        assert_eq!(rc2, carry);

        let b = Tensor::uniform(3, 4, 1.0, &mut rng);
        let r1 = compose_residual_prompt(&b, &v, None, 1).unwrap();
        let r2 = compose_residual_prompt(&b, &v, Some(&r1), 2).unwrap();
        let r3 = compose_residual_prompt(&b, &v, Some(&r2), 3).unwrap();
        let want = b.add(&expand(&v, 3)).scale(3.0);
        assert!(r3.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn residual_carry_must_match_layer() {
        let b = Tensor::<f64>::zeros(2, 4);
        let v = Tensor::zeros(1, 4);
        assert!(compose_residual_prompt(&b, &v, Some(&b), 1).is_err());
        assert!(compose_residual_prompt(&b, &v, None, 2).is_err());
        assert!(compose_residual_prompt(&b, &v, None, 0).is_err());
    }
}
