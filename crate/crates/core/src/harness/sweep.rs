//! α sweeps over settings, seeds and method variants with a per-cell cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, NamedVariant, SweepConfig};
use super::train::{run_train, REPORT_JSON};
use crate::error::HarnessError;
use crate::flexdata::{ProtocolSetting, ProtocolSpec};
use crate::metrics::EvalReport;

pub const CACHE_ENV: &str = "FLEXPROMPT_CACHE";
pub const METRICS: [&str; 4] = ["acer", "apcer", "bpcer", "hter"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub alpha: f64,
    pub seed: u64,
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct SweepRequest {
    pub base: ExperimentConfig,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Overrides the settings listed in the base config.
    pub settings: Option<Vec<ProtocolSetting>>,
    pub resume: bool,
    pub cache_root: PathBuf,
}

impl SweepRequest {
    /// Cache root from `FLEXPROMPT_CACHE`, else `<output_dir>/cache`.
    pub fn new(base: ExperimentConfig, alphas: Vec<f64>, seeds: Vec<u64>) -> Self {
        let cache_root = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| base.output_dir.join("cache"));
        Self {
            base,
            alphas,
            seeds,
            settings: None,
            resume: false,
            cache_root,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub computed: usize,
    pub reused: usize,
    pub failed: usize,
}

/// Parses `start:end:step` (inclusive) or a comma list.
pub fn parse_alphas(s: &str) -> Result<Vec<f64>, HarnessError> {
    let bad = || HarnessError::Invalid(format!("bad alpha list `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    let vals = if parts.len() == 3 {
        let [a, b, st] = [parts[0], parts[1], parts[2]].map(|x| x.trim().parse::<f64>());
        let (a, b, st) = (a.map_err(|_| bad())?, b.map_err(|_| bad())?, st.map_err(|_| bad())?);
        if !(st > 0.0) || b < a {
            return Err(bad());
        }
        let n = ((b - a) / st + 1e-9).floor() as usize;
        // rounded to 1e-9 so 0.1-steps land on their decimal values
        (0..=n).map(|k| ((a + k as f64 * st) * 1e9).round() / 1e9).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?
    };
    if vals.is_empty() || vals.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(bad());
    }
    Ok(vals)
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, HarnessError> {
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|_| HarnessError::Invalid(format!("bad seed `{x}`"))))
        .collect()
}

/// Config of one sweep cell; its output directory is the cache slot.
pub fn cell_config(req: &SweepRequest, setting: ProtocolSetting, alpha: f64, seed: u64, v: &NamedVariant) -> ExperimentConfig {
    let mut c = req.base.clone();
    c.protocol = ProtocolSpec::new(setting, alpha, seed);
    c.seed = seed;
    c.variant = v.flags.clone();
    c.sweep = SweepConfig::default();
    c.output_dir = PathBuf::new();
    let hash = c.cell_hash();
    c.output_dir = req.cache_root.join(hash);
    c
}

fn cached_report(cfg: &ExperimentConfig) -> Option<EvalReport> {
    let stored = fs::read_to_string(cfg.output_dir.join("config.json")).ok()?;
    if stored != cfg.canonical() {
        return None;
    }
    let text = fs::read_to_string(cfg.output_dir.join(REPORT_JSON)).ok()?;
    serde_json::from_str(&text).ok()
}

fn metric(r: &EvalReport, m: &str) -> f64 {
    match m {
        "acer" => r.acer,
        "apcer" => r.apcer,
        "bpcer" => r.bpcer,
        _ => r.hter,
    }
}

pub fn sweep_alpha(req: &SweepRequest) -> Result<SweepSummary, HarnessError> {
    let settings = req.settings.clone().unwrap_or_else(|| req.base.sweep.settings.clone());
    let variants = &req.base.sweep.variants;
    if variants.is_empty() || settings.is_empty() || req.seeds.is_empty() || req.alphas.is_empty() {
        return Err(HarnessError::Invalid("sweep needs settings, variants, seeds and alphas".into()));
    }
    fs::create_dir_all(&req.cache_root).map_err(|e| HarnessError::from((req.cache_root.clone(), e)))?;
    let mut rows = Vec::new();
    let (mut computed, mut reused, mut failed) = (0, 0, 0);
    for &setting in &settings {
        for &alpha in &req.alphas {
            for &seed in &req.seeds {
                for v in variants {
                    let cfg = cell_config(req, setting, alpha, seed, v);
                    let cached = if req.resume { cached_report(&cfg) } else { None };
                    let result = match cached {
                        Some(r) => {
                            reused += 1;
                            Ok(r)
                        }
                        None => {
                            log::info!("cell {setting} α={alpha} seed={seed} {}", v.name);
                            computed += 1;
                            run_train(&cfg).map(|(_, r)| r)
                        }
                    };
                    let row = |metric: &str, value: f64, status: String| SweepRow {
                        setting: setting.name().to_string(),
                        alpha,
                        seed,
                        variant: v.name.clone(),
                        metric: metric.to_string(),
                        value,
                        status,
                    };
                    match result {
                        Ok(r) => rows.extend(METRICS.iter().map(|m| row(m, metric(&r, m), "ok".into()))),
                        Err(e) => {
                            failed += 1;
                            log::warn!("cell {setting} α={alpha} seed={seed} {} failed: {e}", v.name);
                            rows.push(row("error", f64::NAN, format!("failed: {e}")));
                        }
                    }
                }
            }
        }
    }
    let out = &req.base.output_dir;
    fs::create_dir_all(out).map_err(|e| HarnessError::from((out.clone(), e)))?;
    let csv_path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::from((csv_path.clone(), e)))?;
    let mut plots = Vec::new();
    for &setting in &settings {
        let path = out.join(format!("sweep_{}.svg", setting.name()));
        plot_setting(&path, setting, &rows, "acer")?;
        plots.push(path);
    }
    Ok(SweepSummary {
        rows,
        csv: csv_path,
        plots,
        computed,
        reused,
        failed,
    })
}

/// Seed-averaged metric per variant, keyed by α in thousandths.
fn curves(rows: &[SweepRow], setting: ProtocolSetting, metric: &str) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<i64, (f64, usize)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.setting == setting.name() && r.metric == metric && r.status == "ok") {
        let e = acc
            .entry(r.variant.clone())
            .or_default()
            .entry((r.alpha * 1000.0).round() as i64)
            .or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, pts)| (k, pts.into_iter().map(|(a, (s, n))| (a as f64 / 1000.0, s / n as f64)).collect()))
        .collect()
}

fn plot_setting(path: &Path, setting: ProtocolSetting, rows: &[SweepRow], metric: &str) -> Result<(), HarnessError> {
    let err = |e: &dyn std::fmt::Display| HarnessError::Plot(e.to_string());
    let data = curves(rows, setting, metric);
    let ymax = data
        .values()
        .flatten()
        .map(|p| p.1)
        .fold(0.5f64, f64::max)
        .min(1.0)
        + 0.05;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} vs missing ratio, {}", metric.to_uppercase(), setting.name()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..1f64, 0f64..ymax)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("alpha")
        .y_desc(metric.to_uppercase())
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (name, pts)) in data.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
