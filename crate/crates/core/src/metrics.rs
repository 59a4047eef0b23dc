//! Presentation-attack detection error rates and threshold selection.
//!
//! Decision rule: `score ≥ τ` ⇒ live. Candidate thresholds are `0`, `1` and
//! the midpoints of adjacent distinct scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, MetricsError};
use crate::flexdata::{Label, ProtocolSpec};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    pub split: String,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::Length(scores.len(), labels.len()));
        }
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Ok(Self {
            ids,
            scores,
            labels,
            split: String::new(),
        })
    }

    /// Builds a set from live and spoof score lists.
    pub fn from_classes(live: &[f64], spoof: &[f64]) -> Self {
        let scores: Vec<f64> = live.iter().chain(spoof).copied().collect();
        let labels = live
            .iter()
            .map(|_| Label::Live)
            .chain(spoof.iter().map(|_| Label::Spoof))
            .collect();
        Self::new(scores, labels).expect("lengths agree by construction")
    }

    pub fn with_split(mut self, split: impl Into<String>) -> Self {
        self.split = split.into();
        self
    }

    pub fn push(&mut self, id: impl Into<String>, score: f64, label: Label) {
        self.ids.push(id.into());
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(live, spoof)` counts.
    pub fn counts(&self) -> (usize, usize) {
        let live = self.labels.iter().filter(|l| l.is_live()).count();
        (live, self.labels.len() - live)
    }

    fn require_classes(&self) -> Result<(usize, usize), MetricsError> {
        if self.scores.len() != self.labels.len() {
            return Err(MetricsError::Length(self.scores.len(), self.labels.len()));
        }
        let (live, spoof) = self.counts();
        if live == 0 {
            return Err(MetricsError::EmptyClass("live"));
        }
        if spoof == 0 {
            return Err(MetricsError::EmptyClass("spoof"));
        }
        Ok((live, spoof))
    }

    pub fn rows(&self) -> Vec<ScoreRow> {
        (0..self.len())
            .map(|i| ScoreRow {
                id: self.ids[i].clone(),
                score: self.scores[i],
                label: self.labels[i].class() as u8,
                split: self.split.clone(),
            })
            .collect()
    }

    /// Rows whose split matches `split`, or all rows when `None`.
    pub fn from_rows(rows: &[ScoreRow], split: Option<&str>) -> Result<Self, MetricsError> {
        let mut s = ScoreSet {
            split: split.unwrap_or_default().to_string(),
            ..Default::default()
        };
        for r in rows.iter().filter(|r| split.map_or(true, |sp| r.split == sp)) {
            let label = Label::from_class(r.label).ok_or(MetricsError::Length(r.label as usize, 1))?;
            s.push(r.id.clone(), r.score, label);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HterRates {
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
}

pub fn classification_rates(set: &ScoreSet, tau: f64) -> Result<Rates, MetricsError> {
    let (live, spoof) = set.require_classes()?;
    let mut spoof_accepted = 0usize;
    let mut live_rejected = 0usize;
    for (&s, l) in set.scores.iter().zip(&set.labels) {
        let predicted_live = s >= tau;
        match (l.is_live(), predicted_live) {
            (false, true) => spoof_accepted += 1,
            (true, false) => live_rejected += 1,
            _ => {}
        }
    }
    let apcer = spoof_accepted as f64 / spoof as f64;
    let bpcer = live_rejected as f64 / live as f64;
    Ok(Rates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

pub fn hter(set: &ScoreSet, tau: f64) -> Result<HterRates, MetricsError> {
    let r = classification_rates(set, tau)?;
    Ok(HterRates {
        far: r.apcer,
        frr: r.bpcer,
        hter: r.acer,
    })
}

/// Sorted distinct candidate thresholds.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut c: Vec<f64> = u.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    c.push(0.0);
    c.push(1.0);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Per-class sorted scores for rate queries by binary search.
struct Sweep {
    live: Vec<f64>,
    spoof: Vec<f64>,
}

impl Sweep {
    fn new(set: &ScoreSet) -> Self {
        let mut live = Vec::new();
        let mut spoof = Vec::new();
        for (&s, l) in set.scores.iter().zip(&set.labels) {
            if l.is_live() {
                live.push(s)
            } else {
                spoof.push(s)
            }
        }
        live.sort_by(f64::total_cmp);
        spoof.sort_by(f64::total_cmp);
        Self { live, spoof }
    }

    fn rates(&self, tau: f64) -> (f64, f64) {
        let below = |v: &[f64]| v.partition_point(|&s| s < tau);
        let apcer = (self.spoof.len() - below(&self.spoof)) as f64 / self.spoof.len() as f64;
        let bpcer = below(&self.live) as f64 / self.live.len() as f64;
        (apcer, bpcer)
    }
}

/// Threshold minimizing `|apcer − bpcer|`; ties go to the smaller ACER,
/// then the smaller threshold.
pub fn eer_threshold(dev: &ScoreSet) -> Result<f64, MetricsError> {
    dev.require_classes()?;
    let sweep = Sweep::new(dev);
    let mut best: Option<(f64, f64, f64)> = None;
    for tau in candidate_thresholds(&dev.scores) {
        let (a, b) = sweep.rates(tau);
        let key = ((a - b).abs(), (a + b) / 2.0, tau);
        let better = match best {
            None => true,
            Some(k) => key.0 < k.0 || (key.0 == k.0 && (key.1 < k.1 || (key.1 == k.1 && key.2 < k.2))),
        };
        if better {
            best = Some(key);
        }
    }
    Ok(best.expect("candidate set is never empty").2)
}

/// Largest candidate threshold whose BPCER stays within `target`; falls back
/// to `0` with a warning when none qualifies.
pub fn bpcer_threshold(dev: &ScoreSet, target: f64) -> Result<f64, MetricsError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(MetricsError::Target(target));
    }
    let (live, _) = dev.counts();
    if live == 0 {
        return Err(MetricsError::EmptyClass("live"));
    }
    let mut live_scores: Vec<f64> = dev
        .scores
        .iter()
        .zip(&dev.labels)
        .filter(|(_, l)| l.is_live())
        .map(|(&s, _)| s)
        .collect();
    live_scores.sort_by(f64::total_cmp);
    let chosen = candidate_thresholds(&dev.scores)
        .into_iter()
        .rev()
        .find(|&tau| live_scores.partition_point(|&s| s < tau) as f64 / live as f64 <= target);
    Ok(chosen.unwrap_or_else(|| {
        log::warn!("BPCER target {target} unattainable on dev set; using τ = 0");
        0.0
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    Eer,
    Bpcer(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Eer
    }
}

impl ThresholdRule {
    pub fn select(&self, dev: &ScoreSet) -> Result<f64, MetricsError> {
        match *self {
            ThresholdRule::Eer => eer_threshold(dev),
            ThresholdRule::Bpcer(t) => bpcer_threshold(dev, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Intra,
    Cross,
}

impl EvalMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "intra" => Some(EvalMode::Intra),
            "cross" => Some(EvalMode::Cross),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub threshold: f64,
    pub threshold_rule: ThresholdRule,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub protocol: Option<ProtocolSpec>,
    pub n_live: usize,
    pub n_spoof: usize,
}

impl EvalReport {
    /// Rates of `test` at a threshold chosen on `dev`.
    pub fn evaluate(
        dev: &ScoreSet,
        test: &ScoreSet,
        rule: ThresholdRule,
        mode: EvalMode,
        protocol: Option<ProtocolSpec>,
    ) -> Result<Self, MetricsError> {
        let tau = rule.select(dev)?;
        Self::at_threshold(test, tau, rule, mode, protocol)
    }

    pub fn at_threshold(
        test: &ScoreSet,
        tau: f64,
        rule: ThresholdRule,
        mode: EvalMode,
        protocol: Option<ProtocolSpec>,
    ) -> Result<Self, MetricsError> {
        let r = classification_rates(test, tau)?;
        let h = hter(test, tau)?;
        let (n_live, n_spoof) = test.counts();
        Ok(Self {
            mode,
            threshold: tau,
            threshold_rule: rule,
            apcer: r.apcer,
            bpcer: r.bpcer,
            acer: r.acer,
            far: h.far,
            frr: h.frr,
            hter: h.hter,
            protocol,
            n_live,
            n_spoof,
        })
    }

    /// The headline number: ACER for intra tests, HTER for cross tests.
    pub fn headline(&self) -> f64 {
        match self.mode {
            EvalMode::Intra => self.acer,
            EvalMode::Cross => self.hter,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.threshold, self.apcer, self.bpcer, self.acer, self.far, self.frr, self.hter]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn flat_row(&self) -> ReportRow {
        ReportRow {
            mode: match self.mode {
                EvalMode::Intra => "intra",
                EvalMode::Cross => "cross",
            }
            .to_string(),
            setting: self.protocol.map(|p| p.setting.name().to_string()).unwrap_or_default(),
            alpha: self.protocol.map(|p| p.alpha),
            seed: self.protocol.map(|p| p.seed),
            threshold: self.threshold,
            apcer: self.apcer,
            bpcer: self.bpcer,
            acer: self.acer,
            far: self.far,
            frr: self.frr,
            hter: self.hter,
            n_live: self.n_live,
            n_spoof: self.n_spoof,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| HarnessError::from((path.to_path_buf(), e)))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(self.flat_row())?;
        w.flush().map_err(|e| HarnessError::from((path.to_path_buf(), e)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    pub setting: String,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub n_live: usize,
    pub n_spoof: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub score: f64,
    pub label: u8,
    pub split: String,
}

pub fn write_scores_csv(path: &Path, sets: &[&ScoreSet]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in sets {
        for r in s.rows() {
            w.serialize(r)?;
        }
    }
    w.flush().map_err(|e| HarnessError::from((path.to_path_buf(), e)))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<ScoreRow>, _>>()?;
    Ok(rows)
}
