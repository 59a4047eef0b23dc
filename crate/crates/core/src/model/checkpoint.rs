//! Single-file parameter archive used for prompt checkpoints and backbone
//! weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "FLXPCKPT"
//! version      u32       1
//! config_len   u64       followed by canonical JSON (sorted keys)
//! fp_len       u64       followed by the backbone fingerprint (ASCII hex)
//! count        u32       number of arrays
//! per array:
//!   name_len   u32       followed by UTF-8 name
//!   dtype      u8        0 = f32, 1 = f64
//!   ndim       u32
//!   dims       u64 × ndim
//!   data       row-major values, dtype width each
//! ```
//!
//! Prompt checkpoints hold the prompt parameters and the head only; the
//! fingerprint identifies the frozen backbone they were trained against.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::backbone::{BackboneWeights, HEAD_PREFIX};
use super::params::ParamStore;
use super::Model;
use crate::error::ModelError;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FLXPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let bytes = T::to_le_bytes_vec(t.data());
        let data = match T::DTYPE {
            DType::F32 => ArrayData::F32(f32::from_le_slice(&bytes)),
            DType::F64 => ArrayData::F64(f64::from_le_slice(&bytes)),
        };
        Self {
            name: name.into(),
            shape: vec![t.rows(), t.cols()],
            data,
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Collapses leading dimensions into rows.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let cols = self.shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { self.numel() / cols };
        let data: Vec<T> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        };
        let (rows, cols) = if self.shape.len() == 1 { (1, self.numel()) } else { (rows, cols) };
        Tensor::from_vec(rows, cols, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub config: Value,
    pub fingerprint: String,
    pub arrays: Vec<NamedArray>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

/// Canonical JSON: object keys sorted, no insignificant whitespace.
pub fn canonical_json(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(v).to_string()
}

pub fn encode_archive(a: &Archive) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = canonical_json(&a.config);
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(a.fingerprint.len() as u64).to_le_bytes());
    out.extend_from_slice(a.fingerprint.as_bytes());
    out.extend_from_slice(&(a.arrays.len() as u32).to_le_bytes());
    for arr in &a.arrays {
        out.extend_from_slice(&(arr.name.len() as u32).to_le_bytes());
        out.extend_from_slice(arr.name.as_bytes());
        out.push(arr.dtype() as u8);
        out.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
        for &d in &arr.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &arr.data {
            ArrayData::F32(v) => out.extend_from_slice(&f32::to_le_bytes_vec(v)),
            ArrayData::F64(v) => out.extend_from_slice(&f64::to_le_bytes_vec(v)),
        }
    }
    out
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn decode_archive(buf: &[u8]) -> Result<Archive, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = c.u64()? as usize;
    let cfg = c.string(n)?;
    let config: Value = serde_json::from_str(&cfg).map_err(|e| e.to_string())?;
    let n = c.u64()? as usize;
    let fingerprint = c.string(n)?;
    let count = c.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = c.string(n)?;
        let dtype = DType::from_tag(c.take(1)?[0]).ok_or_else(|| format!("bad dtype for {name}"))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let bytes = c.take(numel * dtype.size())?;
        let data = match dtype {
            DType::F32 => ArrayData::F32(f32::from_le_slice(bytes)),
            DType::F64 => ArrayData::F64(f64::from_le_slice(bytes)),
        };
        arrays.push(NamedArray { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err("trailing bytes".into());
    }
    Ok(Archive {
        config,
        fingerprint,
        arrays,
    })
}

pub fn write_archive(path: &Path, a: &Archive) -> Result<(), ModelError> {
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_archive(a)).map_err(io)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive, ModelError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode_archive(&buf).map_err(|reason| ModelError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

fn assign_all<T: Scalar>(
    store: &mut ParamStore<T>,
    arrays: &[&NamedArray],
) -> Result<(), ModelError> {
    for arr in arrays {
        store.assign(&arr.name, arr.to_tensor())?;
    }
    Ok(())
}

/// Prompt parameters plus head, tagged with the backbone fingerprint.
pub fn checkpoint_archive<T: Scalar>(model: &Model<T>, config: Value) -> Archive {
    let mut arrays: Vec<NamedArray> = model
        .prompts
        .store()
        .iter()
        .map(|p| NamedArray::from_tensor(&p.name, &p.tensor))
        .collect();
    arrays.extend(
        model
            .backbone
            .store()
            .iter()
            .filter(|p| p.name.starts_with(HEAD_PREFIX))
            .map(|p| NamedArray::from_tensor(&p.name, &p.tensor)),
    );
    Archive {
        config,
        fingerprint: model.backbone.fingerprint(),
        arrays,
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, config: Value) -> Result<(), ModelError> {
    write_archive(path, &checkpoint_archive(model, config))
}

/// Restores prompts and head into `model`. Returns the stored config.
pub fn apply_checkpoint<T: Scalar>(
    archive: &Archive,
    model: &mut Model<T>,
    allow_backbone_mismatch: bool,
) -> Result<Value, ModelError> {
    let actual = model.backbone.fingerprint();
    if archive.fingerprint != actual && !allow_backbone_mismatch {
        return Err(ModelError::FingerprintMismatch {
            stored: archive.fingerprint.clone(),
            actual,
        });
    }
    let (head, prompts): (Vec<&NamedArray>, Vec<&NamedArray>) = archive
        .arrays
        .iter()
        .partition(|a| a.name.starts_with(HEAD_PREFIX));
    for p in model.prompts.store().iter() {
        if !prompts.iter().any(|a| a.name == p.name) {
            return Err(ModelError::MissingParam(p.name.clone()));
        }
    }
    assign_all(model.prompts.store_mut(), &prompts)?;
    assign_all(model.backbone.store_mut(), &head)?;
    Ok(archive.config.clone())
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    model: &mut Model<T>,
    allow_backbone_mismatch: bool,
) -> Result<Value, ModelError> {
    apply_checkpoint(&read_archive(path)?, model, allow_backbone_mismatch)
}

/// Full backbone (head included) in archive form.
pub fn save_backbone<T: Scalar>(path: &Path, w: &BackboneWeights<T>) -> Result<(), ModelError> {
    let config = serde_json::to_value(w.config()).expect("config serializes");
    let arrays = w
        .store()
        .iter()
        .map(|p| NamedArray::from_tensor(&p.name, &p.tensor))
        .collect();
    write_archive(
        path,
        &Archive {
            config,
            fingerprint: w.fingerprint(),
            arrays,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fpck");
        let cfg = ModelConfig::tiny();
        let m = Model::<f32>::random(&cfg, 4).unwrap();
        save_checkpoint(&path, &m, serde_json::json!({"b": 1, "a": [2, {"z": 0, "y": 1}]})).unwrap();
        let mut fresh = Model::<f32>::random(&cfg, 4).unwrap();
        fresh.prompts = crate::prompt::PromptState::zeros(&cfg).unwrap();
        let stored = load_checkpoint(&path, &mut fresh, false).unwrap();
        assert_eq!(fresh, m);
        assert_eq!(canonical_json(&stored), r#"{"a":[2,{"y":1,"z":0}],"b":1}"#);
    }

    #[test]
    fn mismatched_backbone_is_rejected_unless_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fpck");
        let cfg = ModelConfig::tiny();
        let m = Model::<f64>::random(&cfg, 4).unwrap();
        save_checkpoint(&path, &m, Value::Null).unwrap();
        let mut other = Model::<f64>::random(&cfg, 5).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &mut other, false),
            Err(ModelError::FingerprintMismatch { .. })
        ));
        load_checkpoint(&path, &mut other, true).unwrap();
        assert_eq!(other.prompts, m.prompts);
    }

    #[test]
    fn backbone_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.fpck");
        let cfg = ModelConfig::tiny();
        let w = BackboneWeights::<f64>::random(&cfg, 8).unwrap();
        save_backbone(&path, &w).unwrap();
        let a = read_archive(&path).unwrap();
        assert_eq!(a.fingerprint, w.fingerprint());
        assert_eq!(a.arrays.len(), w.store().len());
    }

    #[test]
    fn truncated_archive_is_a_format_error() {
        let a = Archive {
            config: Value::Null,
            fingerprint: "ab".into(),
            arrays: vec![NamedArray::from_tensor("x", &Tensor::<f32>::zeros(2, 2))],
        };
        let bytes = encode_archive(&a);
        assert_eq!(decode_archive(&bytes).unwrap(), a);
        assert!(decode_archive(&bytes[..bytes.len() - 1]).is_err());
    }
}
