//! Segmentation-area subgroups with labels pinned to a reference dataset,
//! and percentage change between a baseline and a treated run.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::Dataset;
use crate::metrics::{
    average_precision, detection_rate, match_dataset, AreaRange, EvalConfig, EvalMode,
    MetricsError, Predictions, Slice, SubgroupScore, NO_DATA,
};

#[derive(Debug, Error)]
pub enum SubgroupError {
    #[error("invalid subgroup spec: {0}")]
    InvalidSpec(String),
    #[error("baseline has {baseline} bins but treated has {treated}")]
    LengthMismatch { baseline: usize, treated: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Fixed-width area bins `((k−1)·w, k·w]` for `k = 1..=bin_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub bin_width: f64,
    pub bin_count: u32,
    /// Name of the dataset whose areas define the labels.
    pub reference: String,
}

impl SubgroupSpec {
    pub fn new(bin_width: f64, bin_count: u32, reference: impl Into<String>) -> Result<Self, SubgroupError> {
        if !(bin_width.is_finite() && bin_width > 0.0) {
            return Err(SubgroupError::InvalidSpec(format!("bin width {bin_width}")));
        }
        if bin_count == 0 {
            return Err(SubgroupError::InvalidSpec("bin count must be at least 1".into()));
        }
        Ok(Self {
            bin_width,
            bin_count,
            reference: reference.into(),
        })
    }

    /// 1-based bin of `area`, or `None` outside `(0, count·w]`.
    pub fn bin_of(&self, area: f64) -> Option<u32> {
        if !(area > 0.0) {
            return None;
        }
        let k = (area / self.bin_width).ceil();
        (k >= 1.0 && k <= f64::from(self.bin_count)).then_some(k as u32)
    }

    /// Inclusive integer-style bounds of bin `k` as labelled in plots,
    /// e.g. `(2501, 3000)` for bin 6 at width 500.
    pub fn bin_bounds(&self, k: u32) -> (f64, f64) {
        let hi = f64::from(k) * self.bin_width;
        (hi - self.bin_width + 1.0, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedLabel {
    pub reference_area: f64,
    pub subgroup: Option<u32>,
    /// Area-range label, e.g. `small`.
    pub size: Option<String>,
}

/// Subgroup and size labels computed once from the reference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedLabels {
    spec: SubgroupSpec,
    entries: BTreeMap<u64, PinnedLabel>,
    area_scale: f64,
}

impl PinnedLabels {
    pub fn spec(&self) -> &SubgroupSpec {
        &self.spec
    }

    pub fn get(&self, annotation_id: u64) -> Option<&PinnedLabel> {
        self.entries.get(&annotation_id)
    }

    pub fn entries(&self) -> &BTreeMap<u64, PinnedLabel> {
        &self.entries
    }

    pub fn reference_area(&self, annotation_id: u64) -> Option<f64> {
        self.entries.get(&annotation_id).map(|e| e.reference_area)
    }

    pub fn subgroup(&self, annotation_id: u64) -> Option<u32> {
        self.entries.get(&annotation_id).and_then(|e| e.subgroup)
    }

    /// Factor converting areas in the evaluated frame to reference areas.
    pub fn area_scale(&self) -> f64 {
        self.area_scale
    }

    /// Same labels for evaluating a dataset whose coordinates are the
    /// reference's multiplied by `scale` (e.g. 4 for ×4 SR). Only the
    /// conversion of prediction areas changes.
    pub fn for_frame(mut self, scale: f64) -> Self {
        self.area_scale = 1.0 / (scale * scale);
        self
    }

    /// Number of labelled annotations per bin, index 0 being bin 1.
    pub fn populations(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.bin_count as usize];
        for k in self.entries.values().filter_map(|e| e.subgroup) {
            counts[k as usize - 1] += 1;
        }
        counts
    }
}

/// Labels every person of the reference `dataset` by its stored area.
pub fn assign_subgroups(dataset: &Dataset, spec: &SubgroupSpec, ranges: &[AreaRange]) -> PinnedLabels {
    let entries = dataset
        .annotations()
        .iter()
        .map(|a| {
            if !(a.area > 0.0) {
                log::warn!("annotation {} has non-positive area {}; no subgroup", a.id, a.area);
            }
            let size = (a.area > 0.0)
                .then(|| ranges.iter().find(|r| r.contains(a.area)))
                .flatten()
                .map(|r| r.label.clone());
            let label = PinnedLabel {
                reference_area: a.area,
                subgroup: spec.bin_of(a.area),
                size,
            };
            (a.id, label)
        })
        .collect();
    PinnedLabels {
        spec: spec.clone(),
        entries,
        area_scale: 1.0,
    }
}

/// AP/AR (and detection rate in detection mode) of each bin, with every
/// person outside the bin ignored. Empty bins carry `NO_DATA`.
pub fn per_subgroup_metrics(
    gt: &Dataset,
    preds: Predictions,
    config: &EvalConfig,
    labels: &PinnedLabels,
) -> Result<Vec<SubgroupScore>, MetricsError> {
    let spec = labels.spec();
    (1..=spec.bin_count)
        .map(|k| {
            let table = match_dataset(gt, preds, config, Slice::Subgroup(k), Some(labels))?;
            let score = average_precision(&table);
            let detection_rate = match config.mode {
                EvalMode::Detection => Some(detection_rate(&table, config.detection_rate_threshold)?),
                EvalMode::Keypoints => None,
            };
            let (area_lo, area_hi) = spec.bin_bounds(k);
            Ok(SubgroupScore {
                index: k,
                area_lo,
                area_hi,
                ap: score.ap,
                ar: score.ar,
                detection_rate,
                num_persons: table.num_gt(),
            })
        })
        .collect()
}

/// `100·(treated − baseline)/baseline` per bin; `None` where the baseline
/// is zero or either side has no data.
pub fn percent_change(baseline: &[f64], treated: &[f64]) -> Result<Vec<Option<f64>>, SubgroupError> {
    if baseline.len() != treated.len() {
        return Err(SubgroupError::LengthMismatch {
            baseline: baseline.len(),
            treated: treated.len(),
        });
    }
    Ok(baseline
        .iter()
        .zip(treated)
        .map(|(&b, &t)| {
            (b != 0.0 && b != NO_DATA && t != NO_DATA).then(|| 100.0 * (t - b) / b)
        })
        .collect())
}

/// Which per-bin quantity a CSV compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupMetric {
    Ap,
    Ar,
    DetectionRate,
}

impl SubgroupMetric {
    pub fn of(self, s: &SubgroupScore) -> f64 {
        match self {
            Self::Ap => s.ap,
            Self::Ar => s.ar,
            Self::DetectionRate => s.detection_rate.unwrap_or(NO_DATA),
        }
    }
}

#[derive(Debug, Serialize)]
struct CsvRow {
    subgroup_index: u32,
    area_lo: f64,
    area_hi: f64,
    metric_baseline: f64,
    metric_treated: f64,
    percent_change: Option<f64>,
    n_persons: usize,
}

/// Plot data: one row per bin. `n_persons` is the baseline population, which
/// equals the treated one under pinning.
pub fn write_subgroup_csv<W: io::Write>(
    out: W,
    baseline: &[SubgroupScore],
    treated: &[SubgroupScore],
    metric: SubgroupMetric,
) -> Result<(), SubgroupError> {
    let b: Vec<f64> = baseline.iter().map(|s| metric.of(s)).collect();
    let t: Vec<f64> = treated.iter().map(|s| metric.of(s)).collect();
    let changes = percent_change(&b, &t)?;
    let mut w = csv::Writer::from_writer(out);
    for ((s, (mb, mt)), pc) in baseline.iter().zip(b.iter().zip(&t)).zip(changes) {
        w.serialize(CsvRow {
            subgroup_index: s.index,
            area_lo: s.area_lo,
            area_hi: s.area_hi,
            metric_baseline: *mb,
            metric_treated: *mt,
            percent_change: pc,
            n_persons: s.num_persons,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    subgroup_index: u32,
    area_lo: f64,
    area_hi: f64,
    ap: f64,
    ar: f64,
    detection_rate: Option<f64>,
    n_persons: usize,
}

/// Per-bin scores of a single run, one row per bin.
pub fn write_scores_csv<W: io::Write>(out: W, scores: &[SubgroupScore]) -> Result<(), SubgroupError> {
    let mut w = csv::Writer::from_writer(out);
    for s in scores {
        w.serialize(ScoreRow {
            subgroup_index: s.index,
            area_lo: s.area_lo,
            area_hi: s.area_hi,
            ap: s.ap,
            ar: s.ar,
            detection_rate: s.detection_rate,
            n_persons: s.num_persons,
        })?;
    }
    w.flush()?;
    Ok(())
}
