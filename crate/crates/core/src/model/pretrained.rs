//! Backbone weight loading from either the native archive or a timm-style
//! ViT safetensors export.

use std::fs;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use super::backbone::{BackboneWeights, HEAD_PREFIX};
use super::checkpoint::{decode_archive, MAGIC};
use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::flexdata::Modality;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which parameters came from the file and which were freshly initialized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadAudit {
    pub matched: Vec<String>,
    /// Head entries absent from the file or with a different class count.
    pub fresh: Vec<String>,
    /// File entries with no counterpart in the model.
    pub ignored: Vec<String>,
}

impl LoadAudit {
    pub fn unmatched_backbone(&self) -> Vec<&String> {
        self.fresh
            .iter()
            .filter(|n| !n.starts_with(HEAD_PREFIX))
            .collect()
    }
}

/// Loads a frozen backbone. The head is kept only when its shape fits;
/// otherwise it is zero-initialized.
pub fn load_pretrained<T: Scalar>(
    source: &Path,
    cfg: &ModelConfig,
) -> Result<(BackboneWeights<T>, LoadAudit), ModelError> {
    let buf = fs::read(source).map_err(|e| ModelError::Io {
        path: source.to_path_buf(),
        source: e,
    })?;
    let entries = if buf.starts_with(MAGIC) {
        let a = decode_archive(&buf).map_err(|reason| ModelError::Format {
            path: source.to_path_buf(),
            reason,
        })?;
        a.arrays
            .iter()
            .map(|arr| (arr.name.clone(), arr.to_tensor::<T>()))
            .collect::<Vec<_>>()
    } else {
        read_timm_safetensors(&buf, source, cfg)?
    };
    let mut w = BackboneWeights::<T>::zeros(cfg)?;
    let mut audit = LoadAudit::default();
    for (name, t) in entries {
        match w.store().id(&name) {
            Some(id) => {
                let want = w.store().get(id).shape();
                if t.shape() != want {
                    if name.starts_with(HEAD_PREFIX) {
                        audit.ignored.push(name);
                        continue;
                    }
                    return Err(ModelError::ShapeMismatch {
                        name,
                        got: vec![t.rows(), t.cols()],
                        want: vec![want.0, want.1],
                    });
                }
                *w.store_mut().get_mut(id) = t;
                audit.matched.push(name);
            }
            None => audit.ignored.push(name),
        }
    }
    let matched = audit.matched.clone();
    let missing: Vec<String> = w
        .store()
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| !matched.contains(n))
        .collect();
    for name in missing {
        if name.starts_with(HEAD_PREFIX) {
            audit.fresh.push(name);
        } else {
            return Err(ModelError::MissingParam(name));
        }
    }
    w.freeze();
    Ok((w, audit))
}

fn view_values(view: &safetensors::tensor::TensorView<'_>, name: &str, path: &Path) -> Result<Vec<f64>, ModelError> {
    let b = view.data();
    Ok(match view.dtype() {
        Dtype::F32 => f32::from_le_slice(b).into_iter().map(f64::from).collect(),
        Dtype::F64 => f64::from_le_slice(b),
        Dtype::BF16 => b
            .chunks_exact(2)
            .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
            .collect(),
        Dtype::F16 => b
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        other => {
            return Err(ModelError::Format {
                path: path.to_path_buf(),
                reason: format!("{name}: unsupported dtype {other:?}"),
            })
        }
    })
}

/// Maps timm ViT names to internal ones, transposing PyTorch `out × in`
/// linear weights to `in × out`.
fn read_timm_safetensors<T: Scalar>(
    buf: &[u8],
    path: &Path,
    cfg: &ModelConfig,
) -> Result<Vec<(String, Tensor<T>)>, ModelError> {
    let st = SafeTensors::deserialize(buf).map_err(|e| ModelError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    let mut names = st.names();
    names.sort();
    for name in names {
        let view = st.tensor(name).map_err(|e| ModelError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let shape = view.shape().to_vec();
        let vals: Vec<T> = view_values(&view, name, path)?
            .into_iter()
            .map(T::lit)
            .collect();
        let numel = vals.len();
        let last = shape.last().copied().unwrap_or(numel.max(1));
        let as_rows = |vals: Vec<T>| Tensor::from_vec(numel / last.max(1), last, vals);
        let is_linear = name.ends_with("qkv.weight")
            || name.ends_with("proj.weight") && name.contains(".attn.")
            || name.ends_with("fc1.weight")
            || name.ends_with("fc2.weight")
            || name == "head.weight";
        if name == "patch_embed.proj.weight" {
            // [d, C, P, P] -> (C·P·P) × d
            let d = shape[0];
            let t = Tensor::from_vec(d, numel / d, vals).transpose();
            if cfg.shared_patch_embed {
                out.push(("patch_embed.weight".to_string(), t));
            } else {
                for m in Modality::ALL {
                    out.push((format!("patch_embed.{}.weight", m.name()), t.clone()));
                }
            }
        } else if name == "patch_embed.proj.bias" {
            let t = Tensor::row_vector(vals);
            if cfg.shared_patch_embed {
                out.push(("patch_embed.bias".to_string(), t));
            } else {
                for m in Modality::ALL {
                    out.push((format!("patch_embed.{}.bias", m.name()), t.clone()));
                }
            }
        } else if is_linear && shape.len() == 2 {
            out.push((name.to_string(), Tensor::from_vec(shape[0], shape[1], vals).transpose()));
        } else if shape.len() <= 1 {
            out.push((name.to_string(), Tensor::row_vector(vals)));
        } else {
            out.push((name.to_string(), as_rows(vals)));
        }
    }
    Ok(out)
}
