//! COCO-style person keypoint annotations: parsing, validation, geometry and
//! coordinate rescaling.

mod geometry;
mod results;
mod scale;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{
    multi_polygon_area, polygon_area, polygons_bbox, rle_area, BBox, GeometryError, Rle,
};
pub use results::{
    parse_detections, parse_keypoint_results, read_detections, read_keypoint_results,
    write_detections, write_keypoint_results, DetectionRecord, KeypointRecord,
};
pub use scale::{scale_annotations, scale_dimension};

/// Number of body keypoints in the COCO person skeleton.
pub const NUM_KEYPOINTS: usize = 17;

/// Category id written into results files.
pub const PERSON_CATEGORY_ID: u64 = 1;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} validation error(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error("scale factor must be finite and positive, got {0}")]
    InvalidFactor(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl CocoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn from_json(text: &str, err: serde_json::Error) -> Self {
        let (line, column) = (err.line(), err.column());
        let offset = byte_offset(text, line, column);
        Self::Parse {
            offset,
            line,
            column,
            message: err.to_string(),
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

/// What a validation failure refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entity {
    Image,
    Annotation,
    Result,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entity: Entity,
    /// Annotation/image id, or the record index for results.
    pub id: u64,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.entity {
            Entity::Image => "image",
            Entity::Annotation => "annotation",
            Entity::Result => "result record",
        };
        write!(f, "{what} {}: {}", self.id, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

/// Ground-truth keypoint. `visibility` is 0 (unlabeled), 1 (occluded) or 2 (visible).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LabeledKeypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: u8,
}

impl LabeledKeypoint {
    pub fn is_labeled(&self) -> bool {
        self.visibility > 0
    }
}

/// Predicted keypoint with the estimator's confidence.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoredKeypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

impl Segmentation {
    pub fn area(&self) -> Result<f64, GeometryError> {
        match self {
            Self::Polygons(p) => multi_polygon_area(p),
            Self::Rle(r) => rle_area(r),
        }
    }
}

/// One ground-truth person.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub keypoints: [LabeledKeypoint; NUM_KEYPOINTS],
    pub segmentation: Option<Segmentation>,
    /// Segmentation area in pixels².
    pub area: f64,
    pub bbox: BBox,
    pub iscrowd: bool,
}

impl PersonAnnotation {
    pub fn num_labeled_keypoints(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_labeled()).count()
    }
}

/// Validated, immutable collection of images and person annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<ImageRecord>,
    annotations: Vec<PersonAnnotation>,
    person_category: serde_json::Value,
    image_index: BTreeMap<u64, usize>,
    by_image: BTreeMap<u64, Vec<usize>>,
    annotation_index: BTreeMap<u64, usize>,
}

impl Dataset {
    /// Builds a dataset, checking every image and annotation invariant.
    pub fn new(
        images: Vec<ImageRecord>,
        annotations: Vec<PersonAnnotation>,
    ) -> Result<Self, CocoError> {
        Self::with_category(images, annotations, default_person_category())
    }

    fn with_category(
        mut images: Vec<ImageRecord>,
        mut annotations: Vec<PersonAnnotation>,
        person_category: serde_json::Value,
    ) -> Result<Self, CocoError> {
        images.sort_by_key(|i| i.id);
        annotations.sort_by_key(|a| a.id);
        let violations = validate(&images, &annotations);
        if !violations.is_empty() {
            return Err(CocoError::Invalid(violations));
        }
        Ok(Self::assemble(images, annotations, person_category))
    }

    /// Builds the lookup tables; callers guarantee the invariants already hold.
    pub(crate) fn assemble(
        images: Vec<ImageRecord>,
        annotations: Vec<PersonAnnotation>,
        person_category: serde_json::Value,
    ) -> Self {
        let image_index = images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
        let annotation_index = annotations
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id, i))
            .collect();
        let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, a) in annotations.iter().enumerate() {
            by_image.entry(a.image_id).or_default().push(i);
        }
        Self {
            images,
            annotations,
            person_category,
            image_index,
            by_image,
            annotation_index,
        }
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn annotations(&self) -> &[PersonAnnotation] {
        &self.annotations
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn annotation(&self, id: u64) -> Option<&PersonAnnotation> {
        self.annotation_index.get(&id).map(|&i| &self.annotations[i])
    }

    pub fn contains_image(&self, id: u64) -> bool {
        self.image_index.contains_key(&id)
    }

    /// Annotations of one image, in ascending annotation id order.
    pub fn annotations_for_image(&self, image_id: u64) -> impl Iterator<Item = &PersonAnnotation> {
        self.by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.annotations[i])
    }

    /// Copy with every image's `file_name` replaced by `rename(image)`.
    pub fn with_file_names(&self, rename: impl Fn(&ImageRecord) -> String) -> Self {
        let images = self
            .images
            .iter()
            .map(|im| ImageRecord {
                file_name: rename(im),
                ..im.clone()
            })
            .collect();
        Self::assemble(images, self.annotations.clone(), self.person_category.clone())
    }

    pub(crate) fn person_category(&self) -> &serde_json::Value {
        &self.person_category
    }

    pub fn to_json(&self) -> serde_json::Value {
        let annotations: Vec<RawAnnotation> = self
            .annotations
            .iter()
            .map(|a| RawAnnotation::from_person(a, self.person_category_id()))
            .collect();
        serde_json::json!({
            "images": self.images,
            "annotations": annotations,
            "categories": [self.person_category],
        })
    }

    fn person_category_id(&self) -> u64 {
        self.person_category
            .get("id")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(PERSON_CATEGORY_ID)
    }

    pub fn write(&self, path: &Path) -> Result<(), CocoError> {
        let text = serde_json::to_string(&self.to_json()).expect("dataset serializes");
        std::fs::write(path, text).map_err(|e| CocoError::io(path, e))
    }
}

fn default_person_category() -> serde_json::Value {
    serde_json::json!({
        "id": PERSON_CATEGORY_ID,
        "name": "person",
        "supercategory": "person",
        "keypoints": KEYPOINT_NAMES,
    })
}

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

fn validate(images: &[ImageRecord], annotations: &[PersonAnnotation]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dims = BTreeMap::new();
    for im in images {
        if !seen.insert(im.id) {
            out.push(Violation {
                entity: Entity::Image,
                id: im.id,
                reason: "duplicate image id".into(),
            });
        }
        if im.width < 1 || im.height < 1 {
            out.push(Violation {
                entity: Entity::Image,
                id: im.id,
                reason: format!("invalid dimensions {}x{}", im.width, im.height),
            });
        }
        dims.insert(im.id, (f64::from(im.width), f64::from(im.height)));
    }
    let mut seen = BTreeSet::new();
    for a in annotations {
        let mut bad = |reason: String| {
            out.push(Violation {
                entity: Entity::Annotation,
                id: a.id,
                reason,
            })
        };
        if !seen.insert(a.id) {
            bad("duplicate annotation id".into());
        }
        let Some(&(w, h)) = dims.get(&a.image_id) else {
            bad(format!("unknown image id {}", a.image_id));
            continue;
        };
        for (i, k) in a.keypoints.iter().enumerate() {
            if k.visibility > 2 {
                bad(format!("keypoint {i} has visibility {} (expected 0, 1 or 2)", k.visibility));
            } else if k.is_labeled()
                && !(k.x.is_finite() && k.y.is_finite() && (0.0..=w).contains(&k.x) && (0.0..=h).contains(&k.y))
            {
                bad(format!(
                    "keypoint {i} at ({}, {}) lies outside the {w}x{h} image",
                    k.x, k.y
                ));
            }
        }
        if !(a.area.is_finite() && a.area >= 0.0) {
            bad(format!("invalid area {}", a.area));
        } else if a.segmentation.is_some() && a.area <= 0.0 {
            bad("segmentation present but area is zero".into());
        }
        if !a.bbox.is_finite() || a.bbox.w < 0.0 || a.bbox.h < 0.0 {
            bad(format!("invalid bbox {:?}", <[f64; 4]>::from(a.bbox)));
        }
        if let Some(Segmentation::Polygons(polys)) = &a.segmentation {
            if let Some(p) = polys.iter().find(|p| p.len() < 6 || p.len() % 2 != 0) {
                bad(format!("polygon with {} coordinates", p.len()));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Deserialize)]
struct RawDataset {
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    #[serde(default)]
    categories: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_keypoints: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentation: Option<RawSegmentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawSegmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [u32; 2], counts: RawCounts },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawCounts {
    List(Vec<u32>),
    Compressed(String),
}

impl RawAnnotation {
    fn from_person(a: &PersonAnnotation, category_id: u64) -> Self {
        let keypoints = a
            .keypoints
            .iter()
            .flat_map(|k| [k.x, k.y, f64::from(k.visibility)])
            .collect();
        let segmentation = a.segmentation.as_ref().map(|s| match s {
            Segmentation::Polygons(p) => RawSegmentation::Polygons(p.clone()),
            Segmentation::Rle(r) => RawSegmentation::Rle {
                size: [r.height, r.width],
                counts: RawCounts::List(r.counts.clone()),
            },
        });
        Self {
            id: a.id,
            image_id: a.image_id,
            category_id: Some(category_id),
            keypoints: Some(keypoints),
            num_keypoints: Some(a.num_labeled_keypoints() as u64),
            segmentation,
            area: Some(a.area),
            bbox: Some(a.bbox.into()),
            iscrowd: u8::from(a.iscrowd),
        }
    }

    fn into_person(self, violations: &mut Vec<Violation>) -> Option<PersonAnnotation> {
        let id = self.id;
        let mut bad = |reason: String| {
            violations.push(Violation {
                entity: Entity::Annotation,
                id,
                reason,
            })
        };
        let mut keypoints = [LabeledKeypoint::default(); NUM_KEYPOINTS];
        if let Some(flat) = &self.keypoints {
            if flat.len() != 3 * NUM_KEYPOINTS {
                bad(format!(
                    "expected {} keypoint values, got {}",
                    3 * NUM_KEYPOINTS,
                    flat.len()
                ));
                return None;
            }
            for (k, chunk) in keypoints.iter_mut().zip(flat.chunks_exact(3)) {
                let v = chunk[2];
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    bad(format!("non-integer visibility flag {v}"));
                    return None;
                }
                *k = LabeledKeypoint {
                    x: chunk[0],
                    y: chunk[1],
                    visibility: v as u8,
                };
            }
        }
        let segmentation = match self.segmentation {
            None => None,
            Some(RawSegmentation::Polygons(p)) if p.is_empty() => None,
            Some(RawSegmentation::Polygons(p)) => Some(Segmentation::Polygons(p)),
            Some(RawSegmentation::Rle { size, counts }) => {
                let rle = match counts {
                    RawCounts::List(c) => Rle::new(size[0], size[1], c),
                    RawCounts::Compressed(s) => Rle::from_compressed(size[0], size[1], &s),
                };
                match rle {
                    Ok(r) => Some(Segmentation::Rle(r)),
                    Err(e) => {
                        bad(e.to_string());
                        return None;
                    }
                }
            }
        };
        let area = match (self.area, &segmentation) {
            (Some(a), _) => a,
            (None, Some(s)) => match s.area() {
                Ok(a) => a,
                Err(e) => {
                    bad(e.to_string());
                    return None;
                }
            },
            (None, None) => 0.0,
        };
        let bbox = match (self.bbox, &segmentation) {
            (Some(b), _) => BBox::from(b),
            (None, Some(Segmentation::Polygons(p))) => polygons_bbox(p).unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0)),
            _ => {
                bad("missing bbox".into());
                return None;
            }
        };
        Some(PersonAnnotation {
            id: self.id,
            image_id: self.image_id,
            keypoints,
            segmentation,
            area,
            bbox,
            iscrowd: self.iscrowd != 0,
        })
    }
}

/// Parses a COCO keypoint annotation file, keeping only person annotations.
pub fn parse_dataset(path: &Path) -> Result<Dataset, CocoError> {
    let text = std::fs::read_to_string(path).map_err(|e| CocoError::io(path, e))?;
    parse_dataset_str(&text)
}

pub fn parse_dataset_str(text: &str) -> Result<Dataset, CocoError> {
    let raw: RawDataset = serde_json::from_str(text).map_err(|e| CocoError::from_json(text, e))?;
    let person_category = raw
        .categories
        .iter()
        .find(|c| c.get("name").and_then(|n| n.as_str()) == Some("person"))
        .or_else(|| {
            raw.categories
                .iter()
                .find(|c| c.get("id").and_then(|n| n.as_u64()) == Some(PERSON_CATEGORY_ID))
        })
        .cloned()
        .unwrap_or_else(default_person_category);
    let person_id = person_category
        .get("id")
        .and_then(|n| n.as_u64())
        .unwrap_or(PERSON_CATEGORY_ID);

    let mut violations = Vec::new();
    let mut annotations = Vec::new();
    let mut skipped = 0usize;
    for a in raw.annotations {
        if a.category_id.unwrap_or(person_id) != person_id {
            skipped += 1;
            continue;
        }
        if let Some(p) = a.into_person(&mut violations) {
            annotations.push(p);
        }
    }
    if skipped > 0 {
        log::debug!("dropped {skipped} non-person annotations");
    }
    if !violations.is_empty() {
        return Err(CocoError::Invalid(violations));
    }
    Dataset::with_category(raw.images, annotations, person_category)
}
