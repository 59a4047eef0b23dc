//! End-to-end training, evaluation and sweep behaviour on small runs.

use std::fs;
use std::path::Path;

use flexprompt_core::flexdata::{ModalityAvailability, ProtocolSetting, ProtocolSpec};
use flexprompt_core::harness::{
    evaluate, init_model, resolve_dataset, run_train, sweep_alpha, train, train_with_data, Dataset,
    DatasetSource, EvalRequest, ExperimentConfig, SweepRequest, CHECKPOINT_FILE,
};
use flexprompt_core::metrics::{read_scores_csv, EvalMode};
use flexprompt_core::model::checkpoint::save_backbone;
use flexprompt_core::model::backbone::BackboneWeights;
use flexprompt_core::ModelConfig;

fn tiny_run(dir: &Path, setting: ProtocolSetting, alpha: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy_synthetic(dir);
    cfg.model = ModelConfig::tiny();
    cfg.protocol = ProtocolSpec::new(setting, alpha, 3);
    cfg.dataset = DatasetSource::Synthetic {
        train: 24,
        dev: 12,
        test: 12,
        seed: 60,
    };
    cfg.optimizer.batch_size = 8;
    cfg.epochs = 2;
    cfg
}

#[test]
fn overfits_a_single_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::toy_synthetic(dir.path());
    cfg.protocol = ProtocolSpec::new(ProtocolSetting::RgbdMissD, 0.0, 0);
    cfg.dataset = DatasetSource::Synthetic {
        train: 16,
        dev: 4,
        test: 4,
        seed: 3,
    };
    cfg.optimizer.batch_size = 16;
    cfg.optimizer.lr = 2e-3;
    cfg.epochs = 200;
    cfg.variant.mmr = false;
    let data = resolve_dataset(&cfg.dataset, cfg.model.image_size).unwrap();
    let out = train_with_data::<f32>(&cfg, &data).unwrap();
    let last = out.record.epochs.last().unwrap();
    assert!(last.bce < 0.05, "final BCE {}", last.bce);
}

#[test]
fn backbone_stays_frozen_and_head_moves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), ProtocolSetting::RgbdirOverlap, 0.4);
    let before = init_model::<f32>(&cfg).unwrap();
    let data = resolve_dataset(&cfg.dataset, cfg.model.image_size).unwrap();
    let out = train_with_data::<f32>(&cfg, &data).unwrap();
    assert_eq!(out.model.backbone.fingerprint(), before.backbone.fingerprint());
    assert_eq!(out.record.backbone_fingerprint, before.backbone.fingerprint());
    let head = |m: &flexprompt_core::Model<f32>| m.backbone.get(m.backbone.ids().head_w).clone();
    assert_ne!(head(&out.model), head(&before));
    assert_ne!(out.model.prompts, before.prompts);
}

#[test]
fn rgb_only_protocol_equals_stripped_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), ProtocolSetting::RgbdMissD, 1.0);
    let data = resolve_dataset(&cfg.dataset, cfg.model.image_size).unwrap();
    let stripped = Dataset {
        splits: data
            .splits
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|s| s.restricted(ModalityAvailability::RGB_ONLY)).collect()))
            .collect(),
    };
    let a = train_with_data::<f32>(&cfg, &data).unwrap();
    let b = train_with_data::<f32>(&cfg, &stripped).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.record.epochs, b.record.epochs);
    assert_eq!(a.report, b.report);
}

#[test]
fn evaluation_reproduces_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), ProtocolSetting::RgbdirLimited, 0.6);
    let out = train::<f32>(&cfg).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let protocol = dir.path().join("protocol.json");
    let scores = dir.path().join("scores.csv");

    let from_protocol = evaluate(&EvalRequest::new(&ckpt, &protocol, &protocol, EvalMode::Intra)).unwrap();
    assert_eq!(from_protocol, out.report);
    let from_scores = evaluate(&EvalRequest::new(&ckpt, &scores, &scores, EvalMode::Intra)).unwrap();
    assert_eq!(from_scores.acer, out.report.acer);
    assert_eq!(from_scores.threshold, out.report.threshold);

    let rows = read_scores_csv(&scores).unwrap();
    assert_eq!(rows.iter().filter(|r| r.split == "dev").count(), 12);
    assert_eq!(rows.iter().filter(|r| r.split == "test").count(), 12);
}

#[test]
fn cross_mode_with_accept_all_threshold_has_half_hter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), ProtocolSetting::RgbdMissD, 0.5);
    train::<f32>(&cfg).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let protocol = dir.path().join("protocol.json");
    let mut req = EvalRequest::new(&ckpt, &protocol, &protocol, EvalMode::Cross);
    req.threshold = Some(0.0);
    let r = evaluate(&req).unwrap();
    assert_eq!((r.far, r.frr, r.hter), (1.0, 0.0, 0.5));
    assert_eq!(r.headline(), r.hter);
}

#[test]
fn foreign_backbone_needs_explicit_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), ProtocolSetting::RgbdMissD, 0.5);
    train::<f32>(&cfg).unwrap();
    let other = dir.path().join("other.fpck");
    save_backbone(&other, &BackboneWeights::<f32>::random(&cfg.model, 99).unwrap()).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let protocol = dir.path().join("protocol.json");
    let mut req = EvalRequest::new(&ckpt, &protocol, &protocol, EvalMode::Intra);
    req.backbone = Some(other);
    let err = evaluate(&req).unwrap_err().to_string();
    assert!(err.contains("fingerprint"), "{err}");
    req.allow_backbone_mismatch = true;
    assert!(evaluate(&req).unwrap().is_finite());
}

#[test]
fn sweep_writes_long_rows_plots_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(dir.path(), ProtocolSetting::RgbdMissD, 0.0);
    cfg.epochs = 1;
    cfg.sweep.settings = vec![ProtocolSetting::RgbdMissD, ProtocolSetting::RgbdirLimited];
    let mut req = SweepRequest::new(cfg, vec![0.0, 0.5], vec![0]);
    req.cache_root = dir.path().join("cache");
    let first = sweep_alpha(&req).unwrap();
    let cells = 2 * 2 * 2;
    assert_eq!(first.computed, cells);
    assert_eq!(first.failed, 0);
    assert_eq!(first.rows.len(), cells * 4);
    assert_eq!(first.plots.len(), 2);
    for p in &first.plots {
        assert!(fs::read_to_string(p).unwrap().starts_with("<svg"));
    }
    let header = fs::read_to_string(&first.csv).unwrap();
    assert!(header.starts_with("setting,alpha,seed,variant,metric,value,status"));

    req.resume = true;
    let second = sweep_alpha(&req).unwrap();
    assert_eq!((second.computed, second.reused), (0, cells));
    assert_eq!(second.rows, first.rows);

    // a changed cell configuration is recomputed
    req.base.optimizer.lr *= 2.0;
    let third = sweep_alpha(&req).unwrap();
    assert_eq!(third.computed, cells);
}

#[test]
fn run_train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), ProtocolSetting::RgbirMissIr, 0.3);
    let (record, report) = run_train(&cfg).unwrap();
    assert_eq!(record.epochs.len(), 2);
    assert!(report.is_finite());
    for f in ["config.json", "protocol.json", CHECKPOINT_FILE, "run_record.json", "report.json", "report.csv", "scores.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let reloaded = ExperimentConfig::from_file(&dir.path().join("config.json")).unwrap();
    assert_eq!(reloaded, cfg);
}
