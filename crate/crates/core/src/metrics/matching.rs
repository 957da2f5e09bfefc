use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coco::{Dataset, DetectionRecord, KeypointRecord, PersonAnnotation};
use crate::subgroup::PinnedLabels;

use super::accumulate::{average_precision, detection_rate};
use super::report::{MetricReport, RangeScore, ThresholdScore};
use super::similarity::{iou, iou_crowd, oks, oks_ignore_region};
use super::{EvalConfig, EvalMode, MetricsError};

/// Predictions under evaluation; the variant must agree with the config mode.
#[derive(Debug, Clone, Copy)]
pub enum Predictions<'a> {
    Detections(&'a [DetectionRecord]),
    Keypoints(&'a [KeypointRecord]),
}

impl Predictions<'_> {
    pub fn len(&self) -> usize {
        match self {
            Self::Detections(d) => d.len(),
            Self::Keypoints(k) => k.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image_id(&self, i: usize) -> u64 {
        match self {
            Self::Detections(d) => d[i].image_id,
            Self::Keypoints(k) => k[i].image_id,
        }
    }

    fn score(&self, i: usize) -> f64 {
        match self {
            Self::Detections(d) => d[i].score,
            Self::Keypoints(k) => k[i].score,
        }
    }

    /// Area used for range filtering of unmatched predictions.
    fn area(&self, i: usize) -> f64 {
        match self {
            Self::Detections(d) => d[i].bbox.area(),
            Self::Keypoints(k) => k[i].extent_area(),
        }
    }

    fn mode(&self) -> EvalMode {
        match self {
            Self::Detections(_) => EvalMode::Detection,
            Self::Keypoints(_) => EvalMode::Keypoints,
        }
    }

    fn similarity(&self, i: usize, gt: &PersonAnnotation, config: &EvalConfig) -> f64 {
        match self {
            Self::Detections(d) if gt.iscrowd => iou_crowd(&d[i].bbox, &gt.bbox),
            Self::Detections(d) => iou(&d[i].bbox, &gt.bbox),
            Self::Keypoints(k) => oks(&k[i], gt, &config.falloff)
                .unwrap_or_else(|_| oks_ignore_region(&k[i], gt, &config.falloff)),
        }
    }
}

/// Which ground truths count in an evaluation; everything else is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slice {
    All,
    /// Index into `EvalConfig::area_ranges`.
    Area(usize),
    /// 1-based segmentation-area subgroup from pinned labels.
    Subgroup(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtInfo {
    pub id: u64,
    pub ignore: bool,
    pub crowd: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredInfo {
    /// Position in the caller's prediction list.
    pub index: usize,
    pub score: f64,
    /// Prediction area falls outside the slice; such predictions are ignored
    /// when they match nothing.
    pub outside: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub prediction: usize,
    pub gt: Option<u64>,
    pub score: f64,
    pub similarity: f64,
    /// Neither a true nor a false positive.
    pub ignored: bool,
}

/// Greedy matches of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image_id: u64,
    /// Ground truths in matching order: non-ignored first, then by id.
    pub gts: Vec<GtInfo>,
    /// One list per threshold, in descending prediction score.
    pub matches: Vec<Vec<MatchEntry>>,
}

impl ImageMatches {
    pub fn num_gt(&self) -> usize {
        self.gts.iter().filter(|g| !g.ignore).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub slice: Slice,
    pub thresholds: Vec<f64>,
    pub images: Vec<ImageMatches>,
}

impl MatchTable {
    pub fn num_gt(&self) -> usize {
        self.images.iter().map(ImageMatches::num_gt).sum()
    }
}

/// Greedy COCO assignment for one image.
///
/// `similarity[p][g]` is indexed by positions in `preds` and `gts`. At each
/// threshold, predictions are visited in descending score (input order on
/// ties, at most `max_detections`); each takes the unmatched non-ignored
/// ground truth of highest similarity ≥ threshold, lowest id on ties. Failing
/// that it may land on an ignored ground truth (crowds can absorb any number
/// of predictions), which makes the prediction ignored too.
pub fn greedy_match(
    image_id: u64,
    similarity: &[Vec<f64>],
    gts: &[GtInfo],
    preds: &[PredInfo],
    thresholds: &[f64],
    max_detections: usize,
) -> ImageMatches {
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| (gts[g].ignore, gts[g].id));
    let mut pred_order: Vec<usize> = (0..preds.len()).collect();
    pred_order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    pred_order.truncate(max_detections);

    let matches = thresholds
        .iter()
        .map(|&t| {
            let mut taken = vec![false; gts.len()];
            pred_order
                .iter()
                .map(|&p| {
                    let mut best: Option<(usize, f64)> = None;
                    for &g in &gt_order {
                        if taken[g] && !gts[g].crowd {
                            continue;
                        }
                        if let Some((b, _)) = best {
                            if !gts[b].ignore && gts[g].ignore {
                                break;
                            }
                        }
                        let s = similarity[p][g];
                        let better = match best {
                            None => s >= t,
                            Some((_, bs)) => s > bs,
                        };
                        if better {
                            best = Some((g, s));
                        }
                    }
                    match best {
                        Some((g, s)) => {
                            taken[g] = true;
                            MatchEntry {
                                prediction: preds[p].index,
                                gt: Some(gts[g].id),
                                score: preds[p].score,
                                similarity: s,
                                ignored: gts[g].ignore,
                            }
                        }
                        None => MatchEntry {
                            prediction: preds[p].index,
                            gt: None,
                            score: preds[p].score,
                            similarity: 0.0,
                            ignored: preds[p].outside,
                        },
                    }
                })
                .collect()
        })
        .collect();

    ImageMatches {
        image_id,
        gts: gt_order.iter().map(|&g| gts[g]).collect(),
        matches,
    }
}

struct SliceFilter<'a> {
    slice: Slice,
    config: &'a EvalConfig,
    labels: Option<&'a PinnedLabels>,
}

impl<'a> SliceFilter<'a> {
    fn new(
        slice: Slice,
        config: &'a EvalConfig,
        labels: Option<&'a PinnedLabels>,
    ) -> Result<Self, MetricsError> {
        match slice {
            Slice::Area(i) if i >= config.area_ranges.len() => Err(MetricsError::InvalidConfig(
                format!("area range index {i} out of bounds"),
            )),
            Slice::Subgroup(_) if labels.is_none() => Err(MetricsError::MissingLabels),
            _ => Ok(Self {
                slice,
                config,
                labels,
            }),
        }
    }

    fn gt_in_slice(&self, gt: &PersonAnnotation) -> bool {
        let area = self
            .labels
            .and_then(|l| l.reference_area(gt.id))
            .unwrap_or(gt.area);
        match self.slice {
            Slice::All => true,
            Slice::Area(i) => self.config.area_ranges[i].contains(area),
            Slice::Subgroup(k) => self.labels.and_then(|l| l.subgroup(gt.id)) == Some(k),
        }
    }

    fn pred_in_slice(&self, area: f64) -> bool {
        let area = area * self.labels.map_or(1.0, PinnedLabels::area_scale);
        match self.slice {
            Slice::All => true,
            Slice::Area(i) => self.config.area_ranges[i].contains(area),
            Slice::Subgroup(k) => self.labels.and_then(|l| l.spec().bin_of(area)) == Some(k),
        }
    }
}

fn match_indices(
    image_id: u64,
    preds: Predictions,
    indices: &[usize],
    gts: &[&PersonAnnotation],
    filter: &SliceFilter,
) -> ImageMatches {
    let config = filter.config;
    let gt_info: Vec<GtInfo> = gts
        .iter()
        .map(|g| GtInfo {
            id: g.id,
            crowd: g.iscrowd,
            ignore: g.iscrowd
                || !filter.gt_in_slice(g)
                || (config.mode == EvalMode::Keypoints && g.num_labeled_keypoints() == 0),
        })
        .collect();
    let pred_info: Vec<PredInfo> = indices
        .iter()
        .map(|&i| PredInfo {
            index: i,
            score: preds.score(i),
            outside: !filter.pred_in_slice(preds.area(i)),
        })
        .collect();
    let similarity: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| gts.iter().map(|g| preds.similarity(i, g, config)).collect())
        .collect();
    greedy_match(
        image_id,
        &similarity,
        &gt_info,
        &pred_info,
        &config.thresholds,
        config.max_detections,
    )
}

fn check_mode(preds: Predictions, config: &EvalConfig) -> Result<(), MetricsError> {
    config.validate()?;
    if preds.mode() != config.mode {
        return Err(MetricsError::InvalidConfig(format!(
            "{:?} predictions evaluated in {:?} mode",
            preds.mode(),
            config.mode
        )));
    }
    Ok(())
}

/// Matches the predictions and ground truths of a single image.
pub fn match_image(
    image_id: u64,
    preds: Predictions,
    gts: &[&PersonAnnotation],
    config: &EvalConfig,
    slice: Slice,
    labels: Option<&PinnedLabels>,
) -> Result<ImageMatches, MetricsError> {
    check_mode(preds, config)?;
    let filter = SliceFilter::new(slice, config, labels)?;
    let indices: Vec<usize> = (0..preds.len()).collect();
    Ok(match_indices(image_id, preds, &indices, gts, &filter))
}

/// Matches every image of `gt`, in ascending image id order. Predictions on
/// images outside the dataset are not evaluated.
pub fn match_dataset(
    gt: &Dataset,
    preds: Predictions,
    config: &EvalConfig,
    slice: Slice,
    labels: Option<&PinnedLabels>,
) -> Result<MatchTable, MetricsError> {
    check_mode(preds, config)?;
    let filter = SliceFilter::new(slice, config, labels)?;
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for i in 0..preds.len() {
        by_image.entry(preds.image_id(i)).or_default().push(i);
    }
    let images = gt
        .images()
        .par_iter()
        .map(|im| {
            let gts: Vec<&PersonAnnotation> = gt.annotations_for_image(im.id).collect();
            let indices = by_image.get(&im.id).map_or(&[][..], Vec::as_slice);
            match_indices(im.id, preds, indices, &gts, &filter)
        })
        .collect();
    Ok(MatchTable {
        slice,
        thresholds: config.thresholds.clone(),
        images,
    })
}

/// Overall and per-area-range AP/AR for one run.
pub fn evaluate(
    gt: &Dataset,
    preds: Predictions,
    config: &EvalConfig,
    labels: Option<&PinnedLabels>,
) -> Result<MetricReport, MetricsError> {
    let all = match_dataset(gt, preds, config, Slice::All, labels)?;
    let overall = average_precision(&all);
    let per_threshold = config
        .thresholds
        .iter()
        .zip(&overall.per_threshold)
        .map(|(&threshold, &(ap, ar))| ThresholdScore { threshold, ap, ar })
        .collect();
    let ranges = (0..config.area_ranges.len())
        .map(|i| {
            let table = match_dataset(gt, preds, config, Slice::Area(i), labels)?;
            let s = average_precision(&table);
            Ok(RangeScore {
                label: config.area_ranges[i].label.clone(),
                ap: s.ap,
                ar: s.ar,
                num_ground_truths: table.num_gt(),
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let detection_rate = match config.mode {
        EvalMode::Detection => detection_rate(&all, config.detection_rate_threshold).ok(),
        EvalMode::Keypoints => None,
    };
    let num_predictions = (0..preds.len())
        .filter(|&i| gt.contains_image(preds.image_id(i)))
        .count();
    Ok(MetricReport {
        mode: config.mode,
        ap: overall.ap,
        ar: overall.ar,
        per_threshold,
        ranges,
        subgroups: Vec::new(),
        detection_rate,
        num_ground_truths: all.num_gt(),
        num_predictions,
    })
}
