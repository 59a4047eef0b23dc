//! Flexible-modal protocol generation.
//!
//! Subset sizes per setting, for `n` samples and missing ratio `α`:
//!
//! | setting            | RGB-only      | RGB-D     | RGB-IR    | complete |
//! |--------------------|---------------|-----------|-----------|----------|
//! | `RGBD_MISS_D`      | αn            | rest      |           |          |
//! | `RGBIR_MISS_IR`    | αn            |           | rest      |          |
//! | `RGBDIR_OVERLAP`   | αn            |           |           | rest     |
//! | `RGBDIR_LIMITED`, α<½ |            | αn        | αn        | rest     |
//! | `RGBDIR_LIMITED`, α≥½ | rest       | (1−α)n    | (1−α)n    |          |
//!
//! Explicit sizes are rounded half-to-even; "rest" absorbs the remainder so
//! the subsets always partition the ids. Ids are shuffled with the spec seed
//! and sliced contiguously in the column order above.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sample::ModalityAvailability;
use crate::error::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolSetting {
    #[serde(rename = "RGBD_MISS_D")]
    RgbdMissD,
    #[serde(rename = "RGBIR_MISS_IR")]
    RgbirMissIr,
    #[serde(rename = "RGBDIR_OVERLAP")]
    RgbdirOverlap,
    #[serde(rename = "RGBDIR_LIMITED")]
    RgbdirLimited,
}

impl ProtocolSetting {
    pub const ALL: [ProtocolSetting; 4] = [
        ProtocolSetting::RgbdMissD,
        ProtocolSetting::RgbirMissIr,
        ProtocolSetting::RgbdirOverlap,
        ProtocolSetting::RgbdirLimited,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolSetting::RgbdMissD => "RGBD_MISS_D",
            ProtocolSetting::RgbirMissIr => "RGBIR_MISS_IR",
            ProtocolSetting::RgbdirOverlap => "RGBDIR_OVERLAP",
            ProtocolSetting::RgbdirLimited => "RGBDIR_LIMITED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key = s.trim().to_ascii_uppercase();
        Self::ALL.into_iter().find(|v| v.name() == key).or(match key.as_str() {
            "1" => Some(ProtocolSetting::RgbdMissD),
            "2" => Some(ProtocolSetting::RgbirMissIr),
            "3" => Some(ProtocolSetting::RgbdirOverlap),
            "4" => Some(ProtocolSetting::RgbdirLimited),
            _ => None,
        })
    }
}

impl std::fmt::Display for ProtocolSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub setting: ProtocolSetting,
    pub alpha: f64,
    pub seed: u64,
}

impl ProtocolSpec {
    pub fn new(setting: ProtocolSetting, alpha: f64, seed: u64) -> Self {
        Self {
            setting,
            alpha,
            seed,
        }
    }

    /// Same setting and α with a split-specific seed.
    pub fn for_split(&self, split: &str) -> Self {
        let digest = Sha256::digest(split.as_bytes());
        let tag = u64::from_le_bytes(digest[..8].try_into().unwrap());
        Self {
            seed: self.seed ^ tag,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub rgb_only: usize,
    pub rgb_d: usize,
    pub rgb_ir: usize,
    pub complete: usize,
}

impl SubsetCounts {
    pub fn total(&self) -> usize {
        self.rgb_only + self.rgb_d + self.rgb_ir + self.complete
    }

    /// Exact (unrounded) subset sizes.
    pub fn ideal(setting: ProtocolSetting, alpha: f64, n: usize) -> [f64; 4] {
        let n = n as f64;
        match setting {
            ProtocolSetting::RgbdMissD => [alpha * n, (1.0 - alpha) * n, 0.0, 0.0],
            ProtocolSetting::RgbirMissIr => [alpha * n, 0.0, (1.0 - alpha) * n, 0.0],
            ProtocolSetting::RgbdirOverlap => [alpha * n, 0.0, 0.0, (1.0 - alpha) * n],
            ProtocolSetting::RgbdirLimited if alpha < 0.5 => {
                [0.0, alpha * n, alpha * n, (1.0 - 2.0 * alpha) * n]
            }
            ProtocolSetting::RgbdirLimited => [
                (2.0 * alpha - 1.0) * n,
                (1.0 - alpha) * n,
                (1.0 - alpha) * n,
                0.0,
            ],
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.rgb_only, self.rgb_d, self.rgb_ir, self.complete]
    }
}

/// Half-to-even rounding that ignores float noise such as `0.7·1000`.
fn round_count(x: f64) -> usize {
    let r = x.round();
    let snapped = if (x - r).abs() < 1e-9 { r } else { x };
    snapped.round_ties_even().max(0.0) as usize
}

pub fn subset_counts(setting: ProtocolSetting, alpha: f64, n: usize) -> Result<SubsetCounts, DataError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(DataError::Alpha(alpha));
    }
    let k = |x: f64| round_count(x).min(n);
    Ok(match setting {
        ProtocolSetting::RgbdMissD => {
            let m = k(alpha * n as f64);
            SubsetCounts { rgb_only: m, rgb_d: n - m, ..Default::default() }
        }
        ProtocolSetting::RgbirMissIr => {
            let m = k(alpha * n as f64);
            SubsetCounts { rgb_only: m, rgb_ir: n - m, ..Default::default() }
        }
        ProtocolSetting::RgbdirOverlap => {
            let m = k(alpha * n as f64);
            SubsetCounts { rgb_only: m, complete: n - m, ..Default::default() }
        }
        ProtocolSetting::RgbdirLimited if alpha < 0.5 => {
            let m = k(alpha * n as f64).min(n / 2);
            SubsetCounts { rgb_d: m, rgb_ir: m, complete: n - 2 * m, ..Default::default() }
        }
        ProtocolSetting::RgbdirLimited => {
            let m = k((1.0 - alpha) * n as f64).min(n / 2);
            SubsetCounts { rgb_only: n - 2 * m, rgb_d: m, rgb_ir: m, ..Default::default() }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolAssignment {
    pub spec: ProtocolSpec,
    pub counts: SubsetCounts,
    pub assignments: BTreeMap<String, ModalityAvailability>,
}

impl ProtocolAssignment {
    pub fn get(&self, id: &str) -> Option<ModalityAvailability> {
        self.assignments.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Counts recomputed from the map.
    pub fn realized_counts(&self) -> SubsetCounts {
        let mut c = SubsetCounts::default();
        for a in self.assignments.values() {
            match (a.has_depth, a.has_ir) {
                (false, false) => c.rgb_only += 1,
                (true, false) => c.rgb_d += 1,
                (false, true) => c.rgb_ir += 1,
                (true, true) => c.complete += 1,
            }
        }
        c
    }
}

pub fn generate_protocol(ids: &[String], spec: &ProtocolSpec) -> Result<ProtocolAssignment, DataError> {
    if ids.is_empty() {
        return Err(DataError::EmptyIds);
    }
    let counts = subset_counts(spec.setting, spec.alpha, ids.len())?;
    let mut order: Vec<&String> = ids.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut assignments = BTreeMap::new();
    let mut it = order.into_iter();
    let blocks = [
        (counts.rgb_only, ModalityAvailability::RGB_ONLY),
        (counts.rgb_d, ModalityAvailability::RGB_D),
        (counts.rgb_ir, ModalityAvailability::RGB_IR),
        (counts.complete, ModalityAvailability::COMPLETE),
    ];
    for (count, avail) in blocks {
        for id in it.by_ref().take(count) {
            if assignments.insert(id.clone(), avail).is_some() {
                return Err(DataError::Invalid(format!("duplicate sample id `{id}`")));
            }
        }
    }
    Ok(ProtocolAssignment {
        spec: *spec,
        counts,
        assignments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitEcho {
    pub spec: ProtocolSpec,
    pub counts: SubsetCounts,
}

/// Protocols for several splits: the id map plus the spec each split used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolFile {
    pub spec: ProtocolSpec,
    pub splits: BTreeMap<String, SplitEcho>,
    pub assignments: BTreeMap<String, ModalityAvailability>,
}

impl ProtocolFile {
    /// Draws every split with its split-derived seed.
    pub fn generate(ids_by_split: &BTreeMap<String, Vec<String>>, spec: &ProtocolSpec) -> Result<Self, DataError> {
        let mut parts = Vec::new();
        for (split, ids) in ids_by_split {
            if !ids.is_empty() {
                parts.push((split.clone(), generate_protocol(ids, &spec.for_split(split))?));
            }
        }
        Self::from_parts(*spec, parts)
    }

    pub fn from_parts(spec: ProtocolSpec, parts: Vec<(String, ProtocolAssignment)>) -> Result<Self, DataError> {
        let mut splits = BTreeMap::new();
        let mut assignments = BTreeMap::new();
        for (split, a) in parts {
            splits.insert(
                split,
                SplitEcho {
                    spec: a.spec,
                    counts: a.counts,
                },
            );
            for (id, av) in a.assignments {
                if assignments.insert(id.clone(), av).is_some() {
                    return Err(DataError::Invalid(format!("id `{id}` appears in two splits")));
                }
            }
        }
        Ok(Self {
            spec,
            splits,
            assignments,
        })
    }

    pub fn get(&self, id: &str) -> Option<ModalityAvailability> {
        self.assignments.get(id).copied()
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| DataError::from((path.to_path_buf(), e)))
    }

    /// Reads either a multi-split file or a single assignment.
    pub fn read(path: &std::path::Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::from((path.to_path_buf(), e)))?;
        if let Ok(f) = serde_json::from_str::<ProtocolFile>(&text) {
            return Ok(f);
        }
        let a: ProtocolAssignment = serde_json::from_str(&text)
            .map_err(|e| DataError::Invalid(format!("{}: not a protocol file: {e}", path.display())))?;
        Self::from_parts(a.spec, vec![(String::new(), a)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:04}")).collect()
    }

    #[test]
    fn overlap_at_seventy_percent() {
        let c = subset_counts(ProtocolSetting::RgbdirOverlap, 0.7, 1000).unwrap();
        assert_eq!(c.as_array(), [700, 0, 0, 300]);
    }

    #[test]
    fn limited_at_seventy_percent() {
        let c = subset_counts(ProtocolSetting::RgbdirLimited, 0.7, 1000).unwrap();
        assert_eq!(c.as_array(), [400, 300, 300, 0]);
    }

    #[test]
    fn limited_at_thirty_percent() {
        let c = subset_counts(ProtocolSetting::RgbdirLimited, 0.3, 1000).unwrap();
        assert_eq!(c.as_array(), [0, 300, 300, 400]);
    }

    #[test]
    fn alpha_out_of_range() {
        assert!(matches!(
            generate_protocol(&ids(5), &ProtocolSpec::new(ProtocolSetting::RgbdMissD, 1.2, 0)),
            Err(DataError::Alpha(_))
        ));
        assert!(matches!(
            generate_protocol(&[], &ProtocolSpec::new(ProtocolSetting::RgbdMissD, 0.2, 0)),
            Err(DataError::EmptyIds)
        ));
    }

    #[test]
    fn assignment_matches_counts_and_is_deterministic() {
        let spec = ProtocolSpec::new(ProtocolSetting::RgbdirLimited, 0.7, 42);
        let a = generate_protocol(&ids(101), &spec).unwrap();
        let b = generate_protocol(&ids(101), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.realized_counts(), a.counts);
        let c = generate_protocol(&ids(101), &ProtocolSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn splits_use_distinct_draws() {
        let spec = ProtocolSpec::new(ProtocolSetting::RgbdMissD, 0.5, 1);
        assert_ne!(spec.for_split("train").seed, spec.for_split("test").seed);
        let mut by = BTreeMap::new();
        by.insert("train".to_string(), ids(10));
        by.insert("test".to_string(), (0..6).map(|i| format!("t{i}")).collect());
        let f = ProtocolFile::generate(&by, &spec).unwrap();
        assert_eq!(f.assignments.len(), 16);
        assert_eq!(f.splits["test"].counts.total(), 6);
    }

    proptest! {
        #[test]
        fn partition_within_one(setting_ix in 0usize..4, alpha_step in 0usize..=10, n in 1usize..400, seed in any::<u64>()) {
            let setting = ProtocolSetting::ALL[setting_ix];
            let alpha = alpha_step as f64 / 10.0;
            let a = generate_protocol(&ids(n), &ProtocolSpec::new(setting, alpha, seed)).unwrap();
            let real = a.realized_counts();
            prop_assert_eq!(real.total(), n);
            let ideal = SubsetCounts::ideal(setting, alpha, n);
            for (got, want) in real.as_array().iter().zip(ideal) {
                prop_assert!((*got as f64 - want).abs() <= 1.0 + 1e-9);
            }
            prop_assert!(a.assignments.values().all(|v| v.has_rgb));
        }

        #[test]
        fn depth_and_ir_settings_mirror(alpha in 0.0f64..=1.0, n in 1usize..300, seed in any::<u64>()) {
            let d = generate_protocol(&ids(n), &ProtocolSpec::new(ProtocolSetting::RgbdMissD, alpha, seed)).unwrap();
            let i = generate_protocol(&ids(n), &ProtocolSpec::new(ProtocolSetting::RgbirMissIr, alpha, seed)).unwrap();
            for (id, av) in &d.assignments {
                let mirrored = ModalityAvailability::new(av.has_ir, av.has_depth);
                prop_assert_eq!(i.assignments[id], mirrored);
            }
        }
    }
}
