use std::path::{Path, PathBuf};

use super::config::{BackboneSource, DatasetSource, ExperimentConfig, Precision};
use super::data::{prepare, resolve_dataset, Dataset};
use super::train::{load_backbone, score_samples};
use crate::error::HarnessError;
use crate::flexdata::{ProtocolFile, ProtocolSpec};
use crate::metrics::{read_scores_csv, EvalMode, EvalReport, ScoreSet};
use crate::model::checkpoint::{apply_checkpoint, read_archive, Archive};
use crate::model::Model;
use crate::prompt::PromptState;
use crate::scalar::Scalar;

/// Where a score set comes from: a protocol JSON run through the model, or
/// a precomputed score CSV. Files covering several splits contribute only
/// the split being scored.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreSource {
    Protocol(PathBuf),
    Scores(PathBuf),
}

impl ScoreSource {
    pub fn from_path(p: impl Into<PathBuf>) -> Self {
        let p = p.into();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            ScoreSource::Scores(p)
        } else {
            ScoreSource::Protocol(p)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub dev: ScoreSource,
    pub test: ScoreSource,
    pub mode: EvalMode,
    pub allow_backbone_mismatch: bool,
    /// Replaces the backbone named in the checkpoint config.
    pub backbone: Option<PathBuf>,
    /// Target-domain data for the test set; defaults to the training data.
    pub test_dataset: Option<DatasetSource>,
    /// Skips dev-set threshold selection.
    pub threshold: Option<f64>,
}

impl EvalRequest {
    pub fn new(checkpoint: impl Into<PathBuf>, dev: impl Into<PathBuf>, test: impl Into<PathBuf>, mode: EvalMode) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            dev: ScoreSource::from_path(dev),
            test: ScoreSource::from_path(test),
            mode,
            allow_backbone_mismatch: false,
            backbone: None,
            test_dataset: None,
            threshold: None,
        }
    }
}

/// Rebuilds the trained model stored in `archive`.
pub fn model_from_archive<T: Scalar>(
    archive: &Archive,
    backbone_override: Option<&Path>,
    allow_backbone_mismatch: bool,
) -> Result<(Model<T>, ExperimentConfig), HarnessError> {
    let mut cfg: ExperimentConfig = serde_json::from_value(archive.config.clone())?;
    if let Some(p) = backbone_override {
        cfg.backbone = BackboneSource::File { path: p.to_path_buf() };
    }
    let backbone = load_backbone::<T>(&cfg)?;
    let prompts = PromptState::zeros(&cfg.resolved_model())?;
    let mut model = Model::new(backbone, prompts)?;
    apply_checkpoint(archive, &mut model, allow_backbone_mismatch)?;
    Ok((model, cfg))
}

struct Scorer<'a, T> {
    model: &'a Model<T>,
    image_size: usize,
    cached: Vec<(DatasetSource, Dataset)>,
}

impl<T: Scalar> Scorer<'_, T> {
    fn dataset(&mut self, src: &DatasetSource) -> Result<&Dataset, HarnessError> {
        if let Some(i) = self.cached.iter().position(|(s, _)| s == src) {
            return Ok(&self.cached[i].1);
        }
        let d = resolve_dataset(src, self.image_size)?;
        self.cached.push((src.clone(), d));
        Ok(&self.cached.last().unwrap().1)
    }

    fn scores(&mut self, source: &ScoreSource, data: &DatasetSource, split: &str) -> Result<(ScoreSet, Option<ProtocolSpec>), HarnessError> {
        match source {
            ScoreSource::Scores(p) => {
                let rows = read_scores_csv(p)?;
                let own = rows.iter().any(|r| r.split == split).then_some(split);
                let mut s = ScoreSet::from_rows(&rows, own)?;
                s.split = split.to_string();
                Ok((s, None))
            }
            ScoreSource::Protocol(p) => {
                let protocol = ProtocolFile::read(p)?;
                let model = self.model;
                let d = self.dataset(data)?;
                let samples: Vec<_> = if protocol.splits.contains_key(split) {
                    d.split(split).iter().filter(|s| protocol.get(&s.id).is_some()).collect()
                } else {
                    d.select(&protocol)
                };
                if samples.is_empty() {
                    return Err(HarnessError::Invalid(format!("{}: no sample ids match the dataset", p.display())));
                }
                let prepared = prepare(&samples, &protocol)?;
                Ok((score_samples(model, &prepared, split)?, Some(protocol.spec)))
            }
        }
    }
}

fn evaluate_as<T: Scalar>(req: &EvalRequest, archive: &Archive) -> Result<EvalReport, HarnessError> {
    let (model, cfg) = model_from_archive::<T>(archive, req.backbone.as_deref(), req.allow_backbone_mismatch)?;
    let mut scorer = Scorer {
        model: &model,
        image_size: cfg.model.image_size,
        cached: Vec::new(),
    };
    let (test, test_spec) = scorer.scores(&req.test, req.test_dataset.as_ref().unwrap_or(&cfg.dataset), "test")?;
    let tau = match req.threshold {
        Some(t) => t,
        None => {
            let (dev, _) = scorer.scores(&req.dev, &cfg.dataset, "dev")?;
            cfg.threshold.select(&dev)?
        }
    };
    Ok(EvalReport::at_threshold(&test, tau, cfg.threshold, req.mode, test_spec)?)
}

/// Intra mode: threshold from the dev set, ACER on test. Cross mode: the
/// dev set comes from the training domain and test from `test_dataset`;
/// HTER is the headline.
pub fn evaluate(req: &EvalRequest) -> Result<EvalReport, HarnessError> {
    let archive = read_archive(&req.checkpoint)?;
    let precision = archive
        .config
        .get("precision")
        .and_then(|v| serde_json::from_value::<Precision>(v.clone()).ok())
        .unwrap_or_default();
    match precision {
        Precision::F32 => evaluate_as::<f32>(req, &archive),
        Precision::F64 => evaluate_as::<f64>(req, &archive),
    }
}
