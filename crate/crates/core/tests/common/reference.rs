//! Loop-level multimodal ViT with deep prompts, written against parameter
//! names only. Shares no code with the library forward pass.

use flexprompt_core::flexdata::{DenseInput, Modality};
use flexprompt_core::{Model, ModelConfig};

type Mat = Vec<Vec<f64>>;

fn weight(m: &Model<f64>, name: &str) -> Mat {
    let t = m
        .backbone
        .store()
        .by_name(name)
        .unwrap_or_else(|| panic!("missing {name}"));
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().zip(w).map(|(xi, wi)| xi * wi[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / s * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn patches(cfg: &ModelConfig, input: &DenseInput, m: Modality) -> Mat {
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let plane = input.plane(m);
    let mut out = Vec::new();
    for py in 0..side {
        for px in 0..side {
            let mut v = Vec::with_capacity(cfg.in_channels * p * p);
            for c in 0..cfg.in_channels {
                for ky in 0..p {
                    for kx in 0..p {
                        v.push(if input.is_present(m) {
                            let src = c.min(plane.channels - 1);
                            (plane.at(src, py * p + ky, px * p + kx) as f64 - cfg.pixel_mean) / cfg.pixel_std
                        } else {
                            0.0
                        });
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

fn block(m: &Model<f64>, cfg: &ModelConfig, x: &Mat, i: usize) -> Mat {
    let w = |s: &str| weight(m, &format!("blocks.{i}.{s}"));
    let row = |s: &str| w(s).remove(0);
    let d = cfg.embed_dim;
    let hd = d / cfg.num_heads;
    let h = norm(x, &row("norm1.weight"), &row("norm1.bias"));
    let qkv = affine(&h, &w("attn.qkv.weight"), &row("attn.qkv.bias"));
    let n = x.len();
    let mut attn = vec![vec![0.0; d]; n];
    for head in 0..cfg.num_heads {
        let (q0, k0, v0) = (head * hd, d + head * hd, 2 * d + head * hd);
        for a in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|b| (0..hd).map(|t| qkv[a][q0 + t] * qkv[b][k0 + t]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..hd {
                attn[a][head * hd + t] = (0..n).map(|b| e[b] / z * qkv[b][v0 + t]).sum();
            }
        }
    }
    let proj = affine(&attn, &w("attn.proj.weight"), &row("attn.proj.bias"));
    let x1: Mat = x.iter().zip(&proj).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let h2 = norm(&x1, &row("norm2.weight"), &row("norm2.bias"));
    let f1: Mat = affine(&h2, &w("mlp.fc1.weight"), &row("mlp.fc1.bias"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f2 = affine(&f1, &w("mlp.fc2.weight"), &row("mlp.fc2.bias"));
    x1.iter().zip(&f2).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

/// `(logits, embedding)`. `prompts[i]` is appended to the sequence entering
/// layer `i` and its outputs are discarded; an empty list is the plain ViT.
pub fn reference_forward(m: &Model<f64>, input: &DenseInput, prompts: &[Mat]) -> (Vec<f64>, Vec<f64>) {
    let cfg = m.config().clone();
    let pos = weight(m, "pos_embed");
    let cls = weight(m, "cls_token").remove(0);
    let mut x: Mat = vec![cls.iter().zip(&pos[0]).map(|(a, b)| a + b).collect()];
    for md in Modality::ALL {
        let (wn, bn) = if cfg.shared_patch_embed {
            ("patch_embed.weight".to_string(), "patch_embed.bias".to_string())
        } else {
            (format!("patch_embed.{}.weight", md.name()), format!("patch_embed.{}.bias", md.name()))
        };
        let tok = affine(&patches(&cfg, input, md), &weight(m, &wn), &weight(m, &bn)[0]);
        for (k, t) in tok.into_iter().enumerate() {
            x.push(t.iter().zip(&pos[k + 1]).map(|(a, b)| a + b).collect());
        }
    }
    let content = x.len();
    for i in 0..cfg.num_layers {
        let mut seq = x.clone();
        if let Some(p) = prompts.get(i) {
            seq.extend(p.iter().cloned());
        }
        x = block(m, &cfg, &seq, i);
        x.truncate(content);
    }
    let emb = norm(&x[..1].to_vec(), &weight(m, "norm.weight")[0], &weight(m, "norm.bias")[0]).remove(0);
    let logits = affine(&vec![emb.clone()], &weight(m, "head.weight"), &weight(m, "head.bias")[0]).remove(0);
    (logits, emb)
}
