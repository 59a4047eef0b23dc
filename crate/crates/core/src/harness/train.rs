//! Prompt tuning with a frozen backbone.
//!
//! Per step: batch → protocol zero-fill → mask draw → forward on the
//! (possibly masked) input → cross-entropy plus regularization against the
//! complete-input embedding → Adam on prompts and head.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, BackboneSource, ExperimentConfig, Precision, SelectRule, DEV, TEST, TRAIN};
use super::data::{build_protocol, prepare_split, resolve_dataset, Dataset, Prepared};
use super::optim::Adam;
use crate::autograd::{Gradients, Graph};
use crate::error::HarnessError;
use crate::flexdata::ProtocolFile;
use crate::metrics::{classification_rates, write_scores_csv, EvalMode, EvalReport, ScoreSet};
use crate::mmr::{apply_mask, sample_mask, MaskEvent, NORM_EPS};
use crate::model::backbone::BackboneWeights;
use crate::model::checkpoint::save_checkpoint;
use crate::model::params::ParamId;
use crate::model::pretrained::load_pretrained;
use crate::model::{Model, ParamCounts};
use crate::prompt::{build_forward, prompted_forward, ModelLeaves, PromptState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over training samples.
    pub bce: f64,
    /// Mean regularization value over masked samples, if any fired.
    pub mmr: Option<f64>,
    /// Mean over batches of the batch objective.
    pub total: f64,
    pub masked: usize,
    pub samples: usize,
    pub dev_threshold: f64,
    pub dev_acer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub backbone_fingerprint: String,
    pub params: ParamCounts,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch ran.
    pub selected_epoch: usize,
    pub test: EvalReport,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub record: RunRecord,
    pub report: EvalReport,
    pub protocol: ProtocolFile,
    pub dev_scores: ScoreSet,
    pub test_scores: ScoreSet,
}

pub fn load_backbone<T: Scalar>(cfg: &ExperimentConfig) -> Result<BackboneWeights<T>, HarnessError> {
    let mc = cfg.resolved_model();
    Ok(match &cfg.backbone {
        BackboneSource::Random { seed } => {
            let mut w = BackboneWeights::random(&mc, *seed)?;
            w.freeze();
            w
        }
        BackboneSource::File { path } => {
            let (w, audit) = load_pretrained(path, &mc)?;
            if !audit.fresh.is_empty() {
                log::info!("freshly initialized: {}", audit.fresh.join(", "));
            }
            w
        }
    })
}

pub fn init_model<T: Scalar>(cfg: &ExperimentConfig) -> Result<Model<T>, HarnessError> {
    let backbone = load_backbone(cfg)?;
    let prompts = PromptState::random(&cfg.resolved_model(), derive_seed(cfg.seed, "prompts"))?;
    Ok(Model::new(backbone, prompts)?)
}

/// Live-class probabilities without gradient tracking.
pub fn score_samples<T: Scalar>(model: &Model<T>, samples: &[Prepared], split: &str) -> Result<ScoreSet, HarnessError> {
    let mut s = ScoreSet::default().with_split(split);
    for p in samples {
        let out = prompted_forward(model, &p.input)?;
        s.push(p.id.clone(), out.score().to_f64_lossy(), p.label);
    }
    Ok(s)
}

#[derive(Clone, Copy)]
enum Slot {
    Prompt(ParamId),
    Backbone(ParamId),
}

struct Trainable {
    slots: Vec<Slot>,
}

impl Trainable {
    fn new<T: Scalar>(model: &Model<T>) -> Self {
        let ps = model.prompts.store();
        let mut slots: Vec<Slot> = ps.ids().filter(|&id| ps.param(id).trainable).map(Slot::Prompt).collect();
        let bb = model.backbone.store();
        slots.extend(bb.ids().filter(|&id| bb.param(id).trainable).map(Slot::Backbone));
        Self { slots }
    }

    fn shapes<T: Scalar>(&self, model: &Model<T>) -> Vec<(usize, usize)> {
        self.slots.iter().map(|&s| self.tensor(model, s).shape()).collect()
    }

    fn tensor<'m, T: Scalar>(&self, model: &'m Model<T>, s: Slot) -> &'m Tensor<T> {
        match s {
            Slot::Prompt(id) => model.prompts.get(id),
            Slot::Backbone(id) => model.backbone.get(id),
        }
    }

    fn tensor_mut<'m, T: Scalar>(&self, model: &'m mut Model<T>, s: Slot) -> &'m mut Tensor<T> {
        match s {
            Slot::Prompt(id) => model.prompts.store_mut().get_mut(id),
            Slot::Backbone(id) => model.backbone.store_mut().get_mut(id),
        }
    }

    fn accumulate<T: Scalar>(&self, acc: &mut [Tensor<T>], grads: &Gradients<T>, leaves: &ModelLeaves) {
        for (a, &s) in acc.iter_mut().zip(&self.slots) {
            let v = match s {
                Slot::Prompt(id) => leaves.prompts[id.0],
                Slot::Backbone(id) => leaves.backbone[id.0],
            };
            if let Some(g) = grads.get(v) {
                a.add_assign(g);
            }
        }
    }

    fn snapshot<T: Scalar>(&self, model: &Model<T>) -> Vec<Tensor<T>> {
        self.slots.iter().map(|&s| self.tensor(model, s).clone()).collect()
    }

    fn restore<T: Scalar>(&self, model: &mut Model<T>, snap: Vec<Tensor<T>>) {
        for (&s, t) in self.slots.iter().zip(snap) {
            *self.tensor_mut(model, s) = t;
        }
    }
}

struct SampleLoss {
    bce: f64,
    mmr: Option<f64>,
}

/// Forward and backward for one sample, gradients added into `acc`.
#[allow(clippy::too_many_arguments)]
fn sample_step<T: Scalar>(
    model: &Model<T>,
    trainable: &Trainable,
    acc: &mut [Tensor<T>],
    p: &Prepared,
    event: MaskEvent,
    batch: usize,
    masked_in_batch: usize,
    lambda: f64,
    stop_gradient: bool,
) -> Result<SampleLoss, HarnessError> {
    let mut g = Graph::new();
    let masked_input;
    let x = if event.fired() {
        masked_input = apply_mask(&p.input, event);
        &masked_input
    } else {
        &p.input
    };
    let fg = build_forward(&mut g, model, x, true)?;
    let ce = g.cross_entropy(fg.logits, p.label.class());
    let bce = g.value(ce).get(0, 0).to_f64_lossy();
    let mut loss = g.scale(ce, T::lit(1.0 / batch as f64));
    let mut mmr = None;
    let mut extra_leaves = None;
    if event.fired() && lambda > 0.0 {
        let target = if stop_gradient {
            let complete = prompted_forward(model, &p.input)?;
            g.constant(complete.embedding)
        } else {
            let cg = build_forward(&mut g, model, &p.input, true)?;
            extra_leaves = Some(cg.leaves);
            cg.embedding
        };
        let na = g.value(fg.embedding).norm().to_f64_lossy();
        let nb = g.value(target).norm().to_f64_lossy();
        if na < NORM_EPS || nb < NORM_EPS {
            log::warn!("sample {}: embedding norm below {NORM_EPS}; regularization skipped", p.id);
        } else {
            let r = g.neg_cosine(fg.embedding, target, stop_gradient);
            mmr = Some(g.value(r).get(0, 0).to_f64_lossy());
            let r = g.scale(r, T::lit(lambda / masked_in_batch as f64));
            loss = g.add(loss, r);
        }
    }
    let grads = g.backward(loss);
    trainable.accumulate(acc, &grads, &fg.leaves);
    if let Some(l) = &extra_leaves {
        trainable.accumulate(acc, &grads, l);
    }
    Ok(SampleLoss { bce, mmr })
}

fn dev_acer(dev: &ScoreSet, cfg: &ExperimentConfig) -> Result<(f64, f64), HarnessError> {
    let tau = cfg.threshold.select(dev)?;
    Ok((tau, classification_rates(dev, tau)?.acer))
}

/// Trains on an already resolved dataset without touching the filesystem.
pub fn train_with_data<T: Scalar>(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome<T>, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let protocol = build_protocol(cfg, data)?;
    let train_set = prepare_split(data, TRAIN, &protocol)?;
    let dev_set = prepare_split(data, DEV, &protocol)?;
    let test_set = prepare_split(data, TEST, &protocol)?;
    if train_set.is_empty() {
        return Err(HarnessError::Invalid("training split is empty".into()));
    }

    let mut model = init_model::<T>(cfg)?;
    let fingerprint = model.backbone.fingerprint();
    let trainable = Trainable::new(&model);
    let mut opt = Adam::<T>::new(cfg.optimizer.clone(), &trainable.shapes(&model));
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mask"));
    let mc = cfg.resolved_model();
    let gamma = mc.mask_ratio;
    let lambda = mc.mmr_weight;
    let stop_gradient = !cfg.variant.mmr_no_stop_gradient;
    let bs = cfg.optimizer.batch_size;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut bce_sum, mut mmr_sum, mut masked, mut total_sum, mut batches) = (0.0, 0.0, 0usize, 0.0, 0usize);
        for chunk in order.chunks(bs) {
            step += 1;
            let events: Vec<MaskEvent> = chunk
                .iter()
                .map(|&i| {
                    if cfg.variant.mmr {
                        sample_mask(train_set[i].avail, gamma, &mut mask_rng)
                    } else {
                        Ok(MaskEvent::NONE)
                    }
                })
                .collect::<Result<_, _>>()?;
            let fired = events.iter().filter(|e| e.fired()).count();
            let mut acc: Vec<Tensor<T>> = trainable.shapes(&model).iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
            let (mut b_bce, mut b_mmr, mut b_k) = (0.0, 0.0, 0usize);
            for (&i, &ev) in chunk.iter().zip(&events) {
                let l = sample_step(&model, &trainable, &mut acc, &train_set[i], ev, chunk.len(), fired, lambda, stop_gradient)?;
                b_bce += l.bce;
                if let Some(m) = l.mmr {
                    b_mmr += m;
                    b_k += 1;
                }
            }
            let batch_total = b_bce / chunk.len() as f64 + if b_k > 0 { lambda * b_mmr / b_k as f64 } else { 0.0 };
            if !batch_total.is_finite() {
                return Err(HarnessError::Diverged {
                    epoch,
                    step,
                    loss: batch_total,
                });
            }
            opt.begin_step();
            for (k, (&s, grad)) in trainable.slots.iter().zip(&acc).enumerate() {
                opt.update(k, trainable.tensor_mut(&mut model, s), grad);
            }
            bce_sum += b_bce;
            mmr_sum += b_mmr;
            masked += b_k;
            total_sum += batch_total;
            batches += 1;
        }
        let dev_scores = score_samples(&model, &dev_set, DEV)?;
        let (dev_threshold, dacer) = dev_acer(&dev_scores, cfg)?;
        log::info!(
            "epoch {epoch}: bce {:.4} total {:.4} dev ACER {:.4}",
            bce_sum / train_set.len() as f64,
            total_sum / batches as f64,
            dacer
        );
        epochs.push(EpochRecord {
            epoch,
            bce: bce_sum / train_set.len() as f64,
            mmr: (masked > 0).then(|| mmr_sum / masked as f64),
            total: total_sum / batches as f64,
            masked,
            samples: train_set.len(),
            dev_threshold,
            dev_acer: dacer,
        });
        let better = match (&best, cfg.select) {
            (None, _) | (_, SelectRule::Last) => true,
            (Some((b, _, _)), SelectRule::Best) => dacer < *b,
        };
        if better {
            best = Some((dacer, epoch, trainable.snapshot(&model)));
        }
    }
    let selected_epoch = match best {
        Some((_, e, snap)) => {
            trainable.restore(&mut model, snap);
            e
        }
        None => 0,
    };

    if model.backbone.fingerprint() != fingerprint || !model.backbone.is_frozen() {
        return Err(HarnessError::Invalid("frozen backbone changed during training".into()));
    }

    let dev_scores = score_samples(&model, &dev_set, DEV)?;
    let test_scores = score_samples(&model, &test_set, TEST)?;
    let report = EvalReport::evaluate(&dev_scores, &test_scores, cfg.threshold, EvalMode::Intra, Some(cfg.protocol))?;
    let record = RunRecord {
        config_hash: cfg.cell_hash(),
        backbone_fingerprint: fingerprint,
        params: model.param_counts(),
        epochs,
        selected_epoch,
        test: report.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        model,
        record,
        report,
        protocol,
        dev_scores,
        test_scores,
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.fpck";
pub const REPORT_JSON: &str = "report.json";

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<(), HarnessError> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| HarnessError::from((path.to_path_buf(), e)))
}

/// Writes config, protocol, checkpoint, run record, report and scores into
/// `cfg.output_dir`.
pub fn write_artifacts<T: Scalar>(cfg: &ExperimentConfig, out: &TrainOutcome<T>) -> Result<(), HarnessError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::from((dir.clone(), e)))?;
    cfg.write(&dir.join("config.json"))?;
    out.protocol.write(&dir.join("protocol.json"))?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &out.model, cfg.to_value())?;
    write_json(&dir.join("run_record.json"), &out.record)?;
    out.report.write_json(&dir.join(REPORT_JSON))?;
    out.report.write_csv(&dir.join("report.csv"))?;
    write_scores_csv(&dir.join("scores.csv"), &[&out.dev_scores, &out.test_scores])?;
    Ok(())
}

pub fn train<T: Scalar>(cfg: &ExperimentConfig) -> Result<TrainOutcome<T>, HarnessError> {
    let data = resolve_dataset(&cfg.dataset, cfg.model.image_size)?;
    let out = train_with_data::<T>(cfg, &data)?;
    write_artifacts(cfg, &out)?;
    Ok(out)
}

/// Trains at the configured precision; returns the record and test report.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(RunRecord, EvalReport), HarnessError> {
    match cfg.precision {
        Precision::F32 => train::<f32>(cfg).map(|o| (o.record, o.report)),
        Precision::F64 => train::<f64>(cfg).map(|o| (o.record, o.report)),
    }
}
