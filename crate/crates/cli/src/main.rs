use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flexprompt_core::flexdata::{
    read_manifest, synth_dataset, write_directory_dataset, LoadedSample, ProtocolFile,
    ProtocolSetting, ProtocolSpec,
};
use flexprompt_core::harness::{
    evaluate, parse_alphas, parse_seeds, run_train, sweep_alpha, DatasetSource, EvalRequest,
    ExperimentConfig, SelectRule, SweepRequest,
};
use flexprompt_core::metrics::EvalMode;

#[derive(Parser)]
#[command(name = "flexprompt", version, about = "Prompt-tuned multimodal face anti-spoofing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Missing-modality protocol files.
    Protocol {
        #[command(subcommand)]
        action: ProtocolCmd,
    },
    /// Train prompts and head on a frozen backbone.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of missing ratios, seeds and variants.
    Sweep(SweepArgs),
    /// Write a synthetic dataset as PNGs plus a manifest.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum ProtocolCmd {
    Gen {
        #[arg(long)]
        setting: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectArg {
    Best,
    Last,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Intra,
    Cross,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the output directory of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vanilla_prompt_only: bool,
    #[arg(long)]
    contextual_only: bool,
    #[arg(long)]
    no_mmr: bool,
    #[arg(long)]
    mmr_no_stop_gradient: bool,
    #[arg(long, value_enum)]
    select: Option<SelectArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Protocol JSON or score CSV.
    #[arg(long)]
    dev: PathBuf,
    /// Protocol JSON or score CSV.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value = "intra")]
    mode: ModeArg,
    #[arg(long)]
    allow_backbone_mismatch: bool,
    /// Backbone weights replacing the one recorded in the checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// JSON dataset source for the test domain in cross mode.
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    /// Fixed threshold instead of dev-set selection.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "0:1:0.1")]
    alphas: String,
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Comma-separated settings; defaults to the config's list.
    #[arg(long)]
    settings: Option<String>,
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 240)]
    train: usize,
    #[arg(long, default_value_t = 120)]
    dev: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_setting(s: &str) -> Result<ProtocolSetting> {
    ProtocolSetting::parse(s).with_context(|| {
        format!(
            "unknown setting `{s}`; expected one of {}",
            ProtocolSetting::ALL.map(|x| x.name()).join(", ")
        )
    })
}

fn protocol_gen(setting: &str, alpha: f64, seed: u64, manifest: &Path, out: &Path) -> Result<()> {
    let spec = ProtocolSpec::new(parse_setting(setting)?, alpha, seed);
    let mut by_split: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in read_manifest(manifest)? {
        by_split.entry(row.split).or_default().push(row.id);
    }
    let file = ProtocolFile::generate(&by_split, &spec)?;
    file.write(out)?;
    for (split, echo) in &file.splits {
        let c = echo.counts;
        println!(
            "{split}: rgb_only={} rgb_d={} rgb_ir={} complete={}",
            c.rgb_only, c.rgb_d, c.rgb_ir, c.complete
        );
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.variant.vanilla_prompt_only |= a.vanilla_prompt_only;
    cfg.variant.contextual_only |= a.contextual_only;
    if a.no_mmr {
        cfg.variant.mmr = false;
    }
    cfg.variant.mmr_no_stop_gradient |= a.mmr_no_stop_gradient;
    if let Some(s) = a.select {
        cfg.select = match s {
            SelectArg::Best => SelectRule::Best,
            SelectArg::Last => SelectRule::Last,
        };
    }
    let (record, report) = run_train(&cfg)?;
    println!(
        "selected epoch {} | test ACER {:.4} (APCER {:.4}, BPCER {:.4}) at τ={:.4}",
        record.selected_epoch, report.acer, report.apcer, report.bpcer, report.threshold
    );
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Intra => EvalMode::Intra,
        ModeArg::Cross => EvalMode::Cross,
    };
    let mut req = EvalRequest::new(a.ckpt, a.dev, a.test, mode);
    req.allow_backbone_mismatch = a.allow_backbone_mismatch;
    req.backbone = a.backbone;
    req.threshold = a.threshold;
    if let Some(p) = a.test_dataset {
        if mode != EvalMode::Cross {
            bail!("--test-dataset only applies to --mode cross");
        }
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        req.test_dataset = Some(serde_json::from_str::<DatasetSource>(&text)?);
    }
    let report = evaluate(&req)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = a.out {
        report.write_json(&out)?;
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&a.config)?;
    let mut req = SweepRequest::new(cfg, parse_alphas(&a.alphas)?, parse_seeds(&a.seeds)?);
    req.resume = a.resume;
    if let Some(s) = a.settings {
        req.settings = Some(s.split(',').map(parse_setting).collect::<Result<_>>()?);
    }
    let summary = sweep_alpha(&req)?;
    println!(
        "{} cells trained, {} reused, {} failed; results in {}",
        summary.computed,
        summary.reused,
        summary.failed,
        summary.csv.display()
    );
    for p in &summary.plots {
        println!("plot: {}", p.display());
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut all = Vec::new();
    for (k, (split, n)) in [("train", a.train), ("dev", a.dev), ("test", a.test)].into_iter().enumerate() {
        all.extend(synth_dataset(n, a.size, a.seed + k as u64).into_iter().map(|sample| LoadedSample {
            sample,
            split: split.to_string(),
        }));
    }
    std::fs::create_dir_all(&a.out)?;
    let manifest = write_directory_dataset(&a.out, &all)?;
    println!("wrote {} samples; manifest {}", all.len(), manifest.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Protocol {
            action:
                ProtocolCmd::Gen {
                    setting,
                    alpha,
                    seed,
                    manifest,
                    out,
                },
        } => protocol_gen(&setting, alpha, seed, &manifest, &out),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}
