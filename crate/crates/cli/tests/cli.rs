//! The `flexprompt` binary end to end on a small synthetic dataset.

use std::path::Path;
use std::process::{Command, Output};

use flexprompt_core::flexdata::{ProtocolFile, ProtocolSetting, ProtocolSpec};
use flexprompt_core::harness::{DatasetSource, ExperimentConfig};
use flexprompt_core::ModelConfig;

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_flexprompt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_protocol_train_eval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["synth", "--out", s(&data), "--train", "16", "--dev", "8", "--test", "8", "--size", "16", "--seed", "4"]);
    let manifest = data.join("manifest.csv");
    let header = std::fs::read_to_string(&manifest).unwrap();
    assert!(header.starts_with("id,rgb,depth,ir,label,split"));

    let protocol = dir.path().join("protocol.json");
    let out = run(&[
        "protocol", "gen", "--setting", "RGBD_MISS_D", "--alpha", "0.5", "--seed", "1",
        "--manifest", s(&manifest), "--out", s(&protocol),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("dev: rgb_only=4 rgb_d=4"));
    let file = ProtocolFile::read(&protocol).unwrap();
    assert_eq!(file.assignments.len(), 32);

    let mut cfg = ExperimentConfig::toy_synthetic(dir.path().join("run"));
    cfg.model = ModelConfig::tiny();
    cfg.protocol = ProtocolSpec::new(ProtocolSetting::RgbdMissD, 0.5, 1);
    cfg.dataset = DatasetSource::Directory {
        root: data.clone(),
        manifest: manifest.clone(),
        ir_preprocess: "passthrough".into(),
    };
    cfg.optimizer.batch_size = 8;
    cfg.epochs = 1;
    let config = dir.path().join("config.json");
    cfg.write(&config).unwrap();

    let out = run(&["train", "--config", s(&config), "--no-mmr", "--select", "last"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("test ACER"));
    let ckpt = dir.path().join("run/checkpoint.fpck");
    assert!(ckpt.is_file());

    let report = dir.path().join("eval.json");
    let run_protocol = dir.path().join("run/protocol.json");
    run(&[
        "eval", "--ckpt", s(&ckpt), "--dev", s(&run_protocol), "--test", s(&run_protocol),
        "--out", s(&report),
    ]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["acer"].as_f64().unwrap().is_finite());

    let cache = dir.path().join("cache");
    let sweep = |resume: bool| {
        let mut args = vec!["sweep", "--config", s(&config), "--alphas", "0,1", "--settings", "RGBD_MISS_D"];
        if resume {
            args.push("--resume");
        }
        let out = Command::new(env!("CARGO_BIN_EXE_flexprompt"))
            .args(&args)
            .env("FLEXPROMPT_CACHE", &cache)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    assert!(sweep(false).contains("4 cells trained, 0 reused"));
    assert!(sweep(true).contains("0 cells trained, 4 reused"));
    assert!(cache.is_dir());
}

#[test]
fn unknown_setting_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_flexprompt"))
        .args(["protocol", "gen", "--setting", "RGB_X", "--alpha", "0.1", "--manifest", "m.csv", "--out", "p.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown setting"));
}

#[test]
fn shipped_toy_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_synthetic.json");
    let cfg = ExperimentConfig::from_file(&path).unwrap();
    assert_eq!(cfg, ExperimentConfig::toy_synthetic("runs/toy"));
}
