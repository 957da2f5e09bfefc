//! COCO-style evaluation: similarity (OKS, IoU), greedy matching and
//! AP/AR accumulation over threshold grids and area ranges.

mod accumulate;
mod matching;
mod report;
mod similarity;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::NUM_KEYPOINTS;

pub use accumulate::{average_precision, detection_rate, Score, RECALL_POINTS};
pub use matching::{
    evaluate, greedy_match, match_dataset, match_image, GtInfo, ImageMatches, MatchEntry, MatchTable, PredInfo,
    Predictions, Slice,
};
pub use report::{render_table, MetricReport, RangeScore, SubgroupScore, ThresholdScore, NO_DATA};
pub use similarity::{iou, iou_crowd, oks, oks_ignore_region};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("annotation {annotation_id} has no labeled keypoints; OKS is undefined")]
    NoVisibleKeypoints { annotation_id: u64 },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("threshold {0} is not on the configured grid")]
    UnknownThreshold(f64),
    #[error("subgroup slices require pinned labels")]
    MissingLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Box IoU against ground-truth boxes.
    Detection,
    /// OKS against ground-truth keypoints.
    Keypoints,
}

/// Half-open area interval `[min, max)` in pixels².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub label: String,
    pub min: f64,
    #[serde(with = "unbounded")]
    pub max: f64,
}

impl AreaRange {
    pub fn new(label: impl Into<String>, min: f64, max: f64) -> Self {
        Self {
            label: label.into(),
            min,
            max,
        }
    }

    pub fn contains(&self, area: f64) -> bool {
        area >= self.min && area < self.max
    }

    pub fn small() -> Self {
        Self::new("small", 1.0, 32.0 * 32.0)
    }

    pub fn medium() -> Self {
        Self::new("medium", 32.0 * 32.0, 96.0 * 96.0)
    }

    pub fn large() -> Self {
        Self::new("large", 96.0 * 96.0, f64::INFINITY)
    }
}

/// `null` in JSON stands for an unbounded upper limit.
pub(crate) mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Standard COCO per-keypoint sigmas (nose, eyes, ears, shoulders, elbows,
/// wrists, hips, knees, ankles).
pub const COCO_SIGMAS: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Falloff constants `k_i = 2σ_i`.
pub fn coco_falloff() -> [f64; NUM_KEYPOINTS] {
    COCO_SIGMAS.map(|s| 2.0 * s)
}

/// `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Omitted `area_ranges` in JSON take the mode's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawEvalConfig")]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub thresholds: Vec<f64>,
    pub area_ranges: Vec<AreaRange>,
    pub falloff: [f64; NUM_KEYPOINTS],
    pub max_detections: usize,
    /// IoU used by [`detection_rate`] when reporting per-subgroup detection rates.
    pub detection_rate_threshold: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvalConfig {
    mode: EvalMode,
    #[serde(default = "coco_thresholds")]
    thresholds: Vec<f64>,
    area_ranges: Option<Vec<AreaRange>>,
    #[serde(default = "coco_falloff")]
    falloff: [f64; NUM_KEYPOINTS],
    #[serde(default = "default_max_detections")]
    max_detections: usize,
    #[serde(default = "default_rate_threshold")]
    detection_rate_threshold: f64,
}

impl From<RawEvalConfig> for EvalConfig {
    fn from(r: RawEvalConfig) -> Self {
        Self {
            area_ranges: r.area_ranges.unwrap_or_else(|| Self::for_mode(r.mode).area_ranges),
            mode: r.mode,
            thresholds: r.thresholds,
            falloff: r.falloff,
            max_detections: r.max_detections,
            detection_rate_threshold: r.detection_rate_threshold,
        }
    }
}

fn default_max_detections() -> usize {
    20
}

fn default_rate_threshold() -> f64 {
    0.5
}

impl EvalConfig {
    /// Box evaluation with small/medium/large ranges.
    pub fn detection() -> Self {
        Self {
            mode: EvalMode::Detection,
            thresholds: coco_thresholds(),
            area_ranges: vec![AreaRange::small(), AreaRange::medium(), AreaRange::large()],
            falloff: coco_falloff(),
            max_detections: default_max_detections(),
            detection_rate_threshold: default_rate_threshold(),
        }
    }

    /// Keypoint evaluation with medium/large ranges.
    pub fn keypoints() -> Self {
        Self {
            mode: EvalMode::Keypoints,
            area_ranges: vec![AreaRange::medium(), AreaRange::large()],
            ..Self::detection()
        }
    }

    pub fn for_mode(mode: EvalMode) -> Self {
        match mode {
            EvalMode::Detection => Self::detection(),
            EvalMode::Keypoints => Self::keypoints(),
        }
    }

    /// Switches mode; area ranges still at the old mode's defaults follow.
    pub fn with_mode(mut self, mode: EvalMode) -> Self {
        if mode != self.mode && self.area_ranges == Self::for_mode(self.mode).area_ranges {
            self.area_ranges = Self::for_mode(mode).area_ranges;
        }
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::InvalidConfig(m));
        if self.thresholds.is_empty() {
            return bad("empty threshold grid".into());
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad(format!("thresholds must lie in (0, 1]: {:?}", self.thresholds));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("thresholds must be strictly increasing".into());
        }
        if self.falloff.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return bad("falloff constants must be positive".into());
        }
        if self.max_detections == 0 {
            return bad("max_detections must be at least 1".into());
        }
        for r in &self.area_ranges {
            if !(r.min <= r.max) || r.min.is_nan() {
                return bad(format!("area range {} is empty", r.label));
            }
        }
        let mut sorted: Vec<&AreaRange> = self.area_ranges.iter().collect();
        sorted.sort_by(|a, b| a.min.total_cmp(&b.min));
        if sorted.windows(2).any(|w| w[1].min < w[0].max) {
            return bad("area ranges overlap".into());
        }
        Ok(())
    }
}
