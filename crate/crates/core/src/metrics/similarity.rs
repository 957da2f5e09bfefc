use crate::coco::{BBox, KeypointRecord, PersonAnnotation, NUM_KEYPOINTS};

use super::MetricsError;

fn object_scale_sq(gt: &PersonAnnotation) -> f64 {
    gt.area.max(f64::EPSILON)
}

/// Object keypoint similarity between a predicted pose and a ground-truth
/// person, with object scale `s² = gt.area` and falloff constants `k`.
///
/// Only keypoints labeled in the ground truth (`v > 0`) contribute.
pub fn oks(
    prediction: &KeypointRecord,
    gt: &PersonAnnotation,
    k: &[f64; NUM_KEYPOINTS],
) -> Result<f64, MetricsError> {
    let s2 = object_scale_sq(gt);
    let mut total = 0.0;
    let mut labeled = 0usize;
    for ((p, g), ki) in prediction.keypoints.iter().zip(&gt.keypoints).zip(k) {
        if !g.is_labeled() {
            continue;
        }
        let dx = p.x - g.x;
        let dy = p.y - g.y;
        total += (-(dx * dx + dy * dy) / (2.0 * s2 * ki * ki)).exp();
        labeled += 1;
    }
    if labeled == 0 {
        return Err(MetricsError::NoVisibleKeypoints {
            annotation_id: gt.id,
        });
    }
    Ok(total / labeled as f64)
}

/// Similarity used for ground truths without labeled keypoints, which only
/// act as ignore regions: each predicted keypoint is scored by its distance
/// to a box twice the size of the ground-truth box, as the reference COCO
/// evaluator does.
pub fn oks_ignore_region(
    prediction: &KeypointRecord,
    gt: &PersonAnnotation,
    k: &[f64; NUM_KEYPOINTS],
) -> f64 {
    let s2 = object_scale_sq(gt);
    let b = gt.bbox;
    let (x0, x1) = (b.x - b.w, b.x + 2.0 * b.w);
    let (y0, y1) = (b.y - b.h, b.y + 2.0 * b.h);
    let total: f64 = prediction
        .keypoints
        .iter()
        .zip(k)
        .map(|(p, ki)| {
            let dx = (x0 - p.x).max(0.0) + (p.x - x1).max(0.0);
            let dy = (y0 - p.y).max(0.0) + (p.y - y1).max(0.0);
            (-(dx * dx + dy * dy) / (2.0 * s2 * ki * ki)).exp()
        })
        .sum();
    total / NUM_KEYPOINTS as f64
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Overlap with a crowd region: intersection over the prediction's own area.
pub fn iou_crowd(prediction: &BBox, crowd: &BBox) -> f64 {
    let area = prediction.area();
    if area <= 0.0 {
        0.0
    } else {
        prediction.intersection(crowd) / area
    }
}
