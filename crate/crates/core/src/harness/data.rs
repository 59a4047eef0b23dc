use std::collections::BTreeMap;

use super::config::{DatasetSource, ExperimentConfig, SPLITS};
use crate::error::{DataError, HarnessError};
use crate::flexdata::{
    generate_protocol, load_directory_dataset, preprocess_ir_planes, synth_dataset, zero_fill,
    DenseInput, IrPreprocess, Label, ModalityAvailability, MultimodalSample, ProtocolFile,
};

/// Samples grouped by split name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub splits: BTreeMap<String, Vec<MultimodalSample>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[MultimodalSample] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn ids_by_split(&self) -> BTreeMap<String, Vec<String>> {
        self.splits
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|s| s.id.clone()).collect()))
            .collect()
    }

    /// Every sample of every split, in split order.
    pub fn all(&self) -> impl Iterator<Item = &MultimodalSample> {
        self.splits.values().flatten()
    }

    /// Samples listed in `protocol`, in dataset order.
    pub fn select(&self, protocol: &ProtocolFile) -> Vec<&MultimodalSample> {
        self.all().filter(|s| protocol.get(&s.id).is_some()).collect()
    }
}

pub fn resolve_dataset(source: &DatasetSource, image_size: usize) -> Result<Dataset, HarnessError> {
    let mut splits = BTreeMap::new();
    match source {
        DatasetSource::Synthetic {
            train,
            dev,
            test,
            seed,
        } => {
            for (k, (name, n)) in SPLITS.iter().zip([*train, *dev, *test]).enumerate() {
                splits.insert(name.to_string(), synth_dataset(n, image_size, seed + k as u64));
            }
        }
        DatasetSource::Directory {
            root,
            manifest,
            ir_preprocess,
        } => {
            let mode = IrPreprocess::from_name(ir_preprocess)?;
            let manifest = if manifest.is_absolute() {
                manifest.clone()
            } else {
                root.join(manifest)
            };
            for ls in load_directory_dataset(root, &manifest, image_size)? {
                splits.entry(ls.split).or_insert_with(Vec::new).push(ls.sample);
            }
            for samples in splits.values_mut() {
                preprocess_ir_planes(samples, &mode)?;
            }
        }
    }
    Ok(Dataset { splits })
}

/// Protocol assignment for every split of `data` under `cfg`.
pub fn build_protocol(cfg: &ExperimentConfig, data: &Dataset) -> Result<ProtocolFile, HarnessError> {
    let mut parts = Vec::new();
    for (split, ids) in data.ids_by_split() {
        if ids.is_empty() {
            continue;
        }
        parts.push((split.clone(), generate_protocol(&ids, &cfg.protocol_for(&split))?));
    }
    Ok(ProtocolFile::from_parts(cfg.protocol, parts)?)
}

/// A sample ready for the model: protocol-restricted, zero-filled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub input: DenseInput,
    pub avail: ModalityAvailability,
    pub label: Label,
}

pub fn prepare(samples: &[&MultimodalSample], protocol: &ProtocolFile) -> Result<Vec<Prepared>, HarnessError> {
    samples
        .iter()
        .map(|s| {
            let assigned = protocol
                .get(&s.id)
                .ok_or_else(|| HarnessError::Invalid(format!("sample `{}` missing from protocol", s.id)))?;
            let present = s.availability();
            if (assigned.has_depth && !present.has_depth) || (assigned.has_ir && !present.has_ir) {
                return Err(DataError::Row {
                    id: s.id.clone(),
                    reason: "protocol requires a modality the sample lacks".into(),
                }
                .into());
            }
            Ok(Prepared {
                id: s.id.clone(),
                input: zero_fill(s, assigned),
                avail: assigned,
                label: s.label,
            })
        })
        .collect()
}

/// Protocol-filtered samples of one split.
pub fn prepare_split(data: &Dataset, split: &str, protocol: &ProtocolFile) -> Result<Vec<Prepared>, HarnessError> {
    let samples: Vec<&MultimodalSample> = data.split(split).iter().collect();
    prepare(&samples, protocol)
}
