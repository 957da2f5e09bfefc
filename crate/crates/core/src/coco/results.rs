//! COCO results-format interchange for detector and keypoint backends.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BBox, CocoError, Dataset, Entity, ScoredKeypoint, Violation, NUM_KEYPOINTS,
    PERSON_CATEGORY_ID,
};

/// Scored person box. `area` carries the instance mask area when the
/// detector produces masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub area: Option<f64>,
}

/// Scored 17-keypoint pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointRecord {
    pub image_id: u64,
    pub keypoints: [ScoredKeypoint; NUM_KEYPOINTS],
    pub score: f64,
}

impl KeypointRecord {
    /// Area of the box spanned by the predicted keypoints.
    pub fn extent_area(&self) -> f64 {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for k in &self.keypoints {
            x0 = x0.min(k.x);
            x1 = x1.max(k.x);
            y0 = y0.min(k.y);
            y1 = y1.max(k.y);
        }
        (x1 - x0) * (y1 - y0)
    }

    /// Copy with every coordinate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = *self;
        for k in &mut out.keypoints {
            k.x *= factor;
            k.y *= factor;
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct RawResult {
    image_id: u64,
    #[serde(default = "person_id")]
    category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<f64>>,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
}

fn person_id() -> u64 {
    PERSON_CATEGORY_ID
}

fn parse_raw(text: &str, known: Option<&Dataset>) -> Result<Vec<(usize, RawResult)>, CocoError> {
    let raw: Vec<RawResult> =
        serde_json::from_str(text).map_err(|e| CocoError::from_json(text, e))?;
    let mut violations = Vec::new();
    let mut kept = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        if r.category_id != PERSON_CATEGORY_ID {
            continue;
        }
        if let Some(d) = known {
            if !d.contains_image(r.image_id) {
                violations.push(violation(i, format!("unknown image id {}", r.image_id)));
                continue;
            }
        }
        if !r.score.is_finite() {
            violations.push(violation(i, format!("non-finite score {}", r.score)));
            continue;
        }
        kept.push((i, r));
    }
    if violations.is_empty() {
        Ok(kept)
    } else {
        Err(CocoError::Invalid(violations))
    }
}

fn violation(index: usize, reason: String) -> Violation {
    Violation {
        entity: Entity::Result,
        id: index as u64,
        reason,
    }
}

/// Parses detection results. When `known` is given, every record must
/// reference one of its images.
pub fn parse_detections(
    text: &str,
    known: Option<&Dataset>,
) -> Result<Vec<DetectionRecord>, CocoError> {
    let mut violations = Vec::new();
    let mut out = Vec::new();
    for (i, r) in parse_raw(text, known)? {
        let Some(b) = r.bbox else {
            violations.push(violation(i, "missing bbox".into()));
            continue;
        };
        let bbox = BBox::from(b);
        if !bbox.is_finite() || bbox.w < 0.0 || bbox.h < 0.0 {
            violations.push(violation(i, format!("invalid bbox {b:?}")));
            continue;
        }
        if !(0.0..=1.0).contains(&r.score) {
            violations.push(violation(i, format!("score {} outside [0, 1]", r.score)));
            continue;
        }
        if let Some(a) = r.area {
            if !(a.is_finite() && a >= 0.0) {
                violations.push(violation(i, format!("invalid area {a}")));
                continue;
            }
        }
        out.push(DetectionRecord {
            image_id: r.image_id,
            bbox,
            score: r.score,
            area: r.area,
        });
    }
    if violations.is_empty() {
        Ok(out)
    } else {
        Err(CocoError::Invalid(violations))
    }
}

pub fn parse_keypoint_results(
    text: &str,
    known: Option<&Dataset>,
) -> Result<Vec<KeypointRecord>, CocoError> {
    let mut violations = Vec::new();
    let mut out = Vec::new();
    for (i, r) in parse_raw(text, known)? {
        let Some(flat) = r.keypoints else {
            violations.push(violation(i, "missing keypoints".into()));
            continue;
        };
        if flat.len() != 3 * NUM_KEYPOINTS {
            violations.push(violation(
                i,
                format!("expected {} keypoint values, got {}", 3 * NUM_KEYPOINTS, flat.len()),
            ));
            continue;
        }
        if flat.iter().any(|v| !v.is_finite()) {
            violations.push(violation(i, "non-finite keypoint value".into()));
            continue;
        }
        let mut keypoints = [ScoredKeypoint::default(); NUM_KEYPOINTS];
        for (k, c) in keypoints.iter_mut().zip(flat.chunks_exact(3)) {
            *k = ScoredKeypoint {
                x: c[0],
                y: c[1],
                confidence: c[2],
            };
        }
        out.push(KeypointRecord {
            image_id: r.image_id,
            keypoints,
            score: r.score,
        });
    }
    if violations.is_empty() {
        Ok(out)
    } else {
        Err(CocoError::Invalid(violations))
    }
}

pub fn read_detections(
    path: &Path,
    known: Option<&Dataset>,
) -> Result<Vec<DetectionRecord>, CocoError> {
    let text = std::fs::read_to_string(path).map_err(|e| CocoError::io(path, e))?;
    parse_detections(&text, known)
}

pub fn read_keypoint_results(
    path: &Path,
    known: Option<&Dataset>,
) -> Result<Vec<KeypointRecord>, CocoError> {
    let text = std::fs::read_to_string(path).map_err(|e| CocoError::io(path, e))?;
    parse_keypoint_results(&text, known)
}

pub(crate) fn detections_to_string(records: &[DetectionRecord]) -> String {
    let raw: Vec<RawResult> = records
        .iter()
        .map(|d| RawResult {
            image_id: d.image_id,
            category_id: PERSON_CATEGORY_ID,
            bbox: Some(d.bbox.into()),
            keypoints: None,
            score: d.score,
            area: d.area,
        })
        .collect();
    serde_json::to_string(&raw).expect("results serialize")
}

pub(crate) fn keypoints_to_string(records: &[KeypointRecord]) -> String {
    let raw: Vec<RawResult> = records
        .iter()
        .map(|k| RawResult {
            image_id: k.image_id,
            category_id: PERSON_CATEGORY_ID,
            bbox: None,
            keypoints: Some(
                k.keypoints
                    .iter()
                    .flat_map(|p| [p.x, p.y, p.confidence])
                    .collect(),
            ),
            score: k.score,
            area: None,
        })
        .collect();
    serde_json::to_string(&raw).expect("results serialize")
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<(), CocoError> {
    std::fs::write(path, detections_to_string(records)).map_err(|e| CocoError::io(path, e))
}

pub fn write_keypoint_results(path: &Path, records: &[KeypointRecord]) -> Result<(), CocoError> {
    std::fs::write(path, keypoints_to_string(records)).map_err(|e| CocoError::io(path, e))
}
