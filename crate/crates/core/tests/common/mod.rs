//! Fixtures and in-process stub backends shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srpose::coco::{
    BBox, Dataset, DetectionRecord, ImageRecord, KeypointRecord, LabeledKeypoint,
    PersonAnnotation, ScoredKeypoint, Segmentation, NUM_KEYPOINTS,
};
use srpose::metrics::iou;
use srpose::pipeline::{BackendError, Detector, KeypointEstimator, MemorySource};
use srpose::resample::RasterImage;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn image(id: u64, width: u32, height: u32) -> ImageRecord {
    ImageRecord {
        id,
        width,
        height,
        file_name: format!("{id}.png"),
    }
}

/// Keypoints spread over a 5×4 lattice inside `bbox`, all visible.
pub fn skeleton(bbox: BBox) -> [LabeledKeypoint; NUM_KEYPOINTS] {
    let mut kps = [LabeledKeypoint::default(); NUM_KEYPOINTS];
    for (i, k) in kps.iter_mut().enumerate() {
        let (col, row) = ((i % 4) as f64, (i / 4) as f64);
        *k = LabeledKeypoint {
            x: bbox.x + bbox.w * (0.1 + 0.8 * col / 3.0),
            y: bbox.y + bbox.h * (0.1 + 0.8 * row / 4.0),
            visibility: 2,
        };
    }
    kps
}

/// Person whose rectangular mask fills `bbox`.
pub fn person(id: u64, image_id: u64, bbox: BBox) -> PersonAnnotation {
    let (x0, y0, x1, y1) = (bbox.x, bbox.y, bbox.x + bbox.w, bbox.y + bbox.h);
    PersonAnnotation {
        id,
        image_id,
        keypoints: skeleton(bbox),
        segmentation: Some(Segmentation::Polygons(vec![vec![x0, y0, x1, y0, x1, y1, x0, y1]])),
        area: bbox.area(),
        bbox,
        iscrowd: false,
    }
}

pub fn perfect_pose(p: &PersonAnnotation, score: f64) -> KeypointRecord {
    let mut keypoints = [ScoredKeypoint::default(); NUM_KEYPOINTS];
    for (out, k) in keypoints.iter_mut().zip(&p.keypoints) {
        *out = ScoredKeypoint {
            x: k.x,
            y: k.y,
            confidence: 1.0,
        };
    }
    KeypointRecord {
        image_id: p.image_id,
        keypoints,
        score,
    }
}

pub fn perfect_detection(p: &PersonAnnotation, score: f64) -> DetectionRecord {
    DetectionRecord {
        image_id: p.image_id,
        bbox: p.bbox,
        score,
        area: Some(p.area),
    }
}

/// Smooth RGB gradient, the content most images here carry.
pub fn gradient(width: u32, height: u32) -> RasterImage {
    let mut samples = Vec::with_capacity((width * height * 3) as usize);
    for y in 0..height {
        for x in 0..width {
            let u = f64::from(x) / f64::from(width.max(2) - 1);
            let v = f64::from(y) / f64::from(height.max(2) - 1);
            samples.push((255.0 * u).round() as u8);
            samples.push((255.0 * v).round() as u8);
            samples.push((127.5 * (u + v)).round() as u8);
        }
    }
    RasterImage::new(width, height, 3, samples).unwrap()
}

/// `n` images of 160×120 holding up to four non-overlapping persons each, one
/// per quadrant, with square-ish boxes whose areas span ≈400–5000 px².
/// Annotation ids are distinct across the dataset.
pub fn synthetic_dataset(n: u64, seed: u64) -> (Dataset, MemorySource) {
    let mut rng = rng(seed);
    let mut images = Vec::new();
    let mut persons = Vec::new();
    let mut source = MemorySource::default();
    let mut next_id = 1;
    for id in 1..=n {
        images.push(image(id, 160, 120));
        source.insert(id, gradient(160, 120));
        for q in 0..4u32 {
            if q > 0 && rng.gen_bool(0.25) {
                continue;
            }
            let (qx, qy) = (f64::from(q % 2) * 80.0, f64::from(q / 2) * 60.0);
            let w: f64 = rng.gen_range(16.0..78.0);
            let h: f64 = rng.gen_range(24.0..58.0);
            let x = qx + rng.gen_range(0.0..(79.0 - w));
            let y = qy + rng.gen_range(0.0..(59.0 - h));
            persons.push(person(next_id, id, BBox::new(x, y, w, h)));
            next_id += 1;
        }
    }
    (Dataset::new(images, persons).unwrap(), source)
}

/// One keypoint-estimator invocation as seen by a stub.
#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BBox>,
}

/// Scripted backends answering from ground truth, in whichever frame the
/// incoming image is (inferred from its width). With `crossover = Some(T)`
/// keypoints are displaced by a relative error `ρ(s)` that falls with person
/// area natively and flattens under ×s upscaling:
///
/// `ρ(1) = 0.1·T/A`, `ρ(s) = ρ(1)/s² + 0.1·(1 − 1/s²)`,
///
/// so native and upscaled errors cross exactly at original area `T`.
pub struct Oracle {
    pub script: Dataset,
    pub crossover: Option<f64>,
    pub seed: u64,
    pub calls: Mutex<Vec<Call>>,
    pub detect_calls: Mutex<Vec<(u64, u32)>>,
    pub fail: Vec<u64>,
}

impl Oracle {
    pub fn new(script: Dataset) -> Self {
        Self {
            script,
            crossover: None,
            seed: 0,
            calls: Mutex::new(Vec::new()),
            detect_calls: Mutex::new(Vec::new()),
            fail: Vec::new(),
        }
    }

    pub fn with_noise(mut self, crossover: f64, seed: u64) -> Self {
        self.crossover = Some(crossover);
        self.seed = seed;
        self
    }

    pub fn calls(&self) -> Vec<Call> {
        self.calls.lock().unwrap().clone()
    }

    fn frame(&self, image_id: u64, image: &RasterImage) -> f64 {
        let record = self.script.image(image_id).expect("scripted image");
        f64::from(image.width()) / f64::from(record.width)
    }

    pub fn score(p: &PersonAnnotation) -> f64 {
        1.0 - (p.id.wrapping_mul(7919) % 1000) as f64 / 2000.0
    }

    pub fn relative_error(&self, area: f64, s: f64) -> f64 {
        match self.crossover {
            Some(t) if area > 0.0 => {
                let native = 0.1 * t / area;
                native / (s * s) + 0.1 * (1.0 - 1.0 / (s * s))
            }
            _ => 0.0,
        }
    }

    /// Pose for `p` in a frame `s` times the original.
    pub fn pose(&self, p: &PersonAnnotation, s: f64) -> KeypointRecord {
        let d = self.relative_error(p.area, s) * p.area.sqrt();
        let mut rng = rng(self.seed ^ p.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut keypoints = [ScoredKeypoint::default(); NUM_KEYPOINTS];
        for (out, k) in keypoints.iter_mut().zip(&p.keypoints) {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            *out = ScoredKeypoint {
                x: (k.x + d * angle.cos()) * s,
                y: (k.y + d * angle.sin()) * s,
                confidence: 1.0,
            };
        }
        KeypointRecord {
            image_id: p.image_id,
            keypoints,
            score: Self::score(p),
        }
    }

    fn check(&self, image_id: u64) -> Result<(), BackendError> {
        if self.fail.contains(&image_id) {
            return Err(BackendError::Output(format!("scripted failure on {image_id}")));
        }
        Ok(())
    }
}

impl Detector for Oracle {
    fn id(&self) -> String {
        "oracle-detector".into()
    }

    fn detect(&self, image_id: u64, image: &RasterImage) -> Result<Vec<DetectionRecord>, BackendError> {
        self.check(image_id)?;
        self.detect_calls.lock().unwrap().push((image_id, image.width()));
        let s = self.frame(image_id, image);
        Ok(self
            .script
            .annotations_for_image(image_id)
            .filter(|a| !a.iscrowd)
            .map(|a| DetectionRecord {
                image_id,
                bbox: a.bbox.scaled(s),
                score: Self::score(a),
                area: Some(a.area * s * s),
            })
            .collect())
    }
}

impl KeypointEstimator for Oracle {
    fn id(&self) -> String {
        "oracle-keypoints".into()
    }

    fn estimate(
        &self,
        image_id: u64,
        image: &RasterImage,
        boxes: &[BBox],
    ) -> Result<Vec<KeypointRecord>, BackendError> {
        self.check(image_id)?;
        self.calls.lock().unwrap().push(Call {
            image_id,
            width: image.width(),
            height: image.height(),
            boxes: boxes.to_vec(),
        });
        let s = self.frame(image_id, image);
        let persons: Vec<&PersonAnnotation> = self.script.annotations_for_image(image_id).collect();
        Ok(boxes
            .iter()
            .map(|b| {
                let original = b.divided(s);
                let best = persons
                    .iter()
                    .max_by(|x, y| iou(&original, &x.bbox).total_cmp(&iou(&original, &y.bbox)))
                    .expect("box on an image without persons");
                self.pose(best, s)
            })
            .collect())
    }
}

/// Keypoint records indexed by image for order-insensitive comparisons.
pub fn by_image(records: &[KeypointRecord]) -> BTreeMap<u64, Vec<KeypointRecord>> {
    let mut out: BTreeMap<u64, Vec<KeypointRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.image_id).or_default().push(*r);
    }
    out
}

/// Pixel-replicating upscaler: cheap, and exact about dimensions.
pub struct NearestSr;

impl srpose::pipeline::SrBackend for NearestSr {
    fn id(&self) -> String {
        "nearest".into()
    }

    fn upscale(&self, _image_id: u64, image: &RasterImage, scale: u32) -> Result<RasterImage, BackendError> {
        let (w, h, c) = image.shape();
        let mut out = Vec::with_capacity((w * h * scale * scale * u32::from(c)) as usize);
        for y in 0..h * scale {
            for x in 0..w * scale {
                for ch in 0..c {
                    out.push(image.get(x / scale, y / scale, ch));
                }
            }
        }
        Ok(RasterImage::new(w * scale, h * scale, c, out)?)
    }
}
