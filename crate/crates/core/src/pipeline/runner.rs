use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coco::{BBox, Dataset, ImageRecord, KeypointRecord};
use crate::resample::{RasterImage, ResampleError};

use super::backend::{BackendError, Detector, KeypointEstimator, SrBackend};
use super::{route, Branch, PipelineError, RouteDecision, RouterConfig};

/// A run aborts when more than this fraction of its images fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Where the pipeline gets the pixels of an image record.
pub trait ImageSource: Sync {
    fn load(&self, image: &ImageRecord) -> Result<RasterImage, ResampleError>;
}

/// Files named by `file_name` under a root directory.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    root: PathBuf,
}

impl DirectorySource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageSource for DirectorySource {
    fn load(&self, image: &ImageRecord) -> Result<RasterImage, ResampleError> {
        RasterImage::load(&self.root.join(&image.file_name))
    }
}

/// Images held in memory, keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: BTreeMap<u64, RasterImage>,
}

impl MemorySource {
    pub fn new(images: BTreeMap<u64, RasterImage>) -> Self {
        Self { images }
    }

    pub fn insert(&mut self, image_id: u64, image: RasterImage) {
        self.images.insert(image_id, image);
    }
}

impl ImageSource for MemorySource {
    fn load(&self, image: &ImageRecord) -> Result<RasterImage, ResampleError> {
        self.images.get(&image.id).cloned().ok_or_else(|| ResampleError::Io {
            path: PathBuf::from(&image.file_name),
            source: std::io::ErrorKind::NotFound.into(),
        })
    }
}

#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub sr: &'a dyn SrBackend,
    pub detector: &'a dyn Detector,
    pub keypoints: &'a dyn KeypointEstimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineFailure {
    pub image_id: u64,
    pub error: String,
}

/// Keypoints in the original image frame, merged in image-id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    pub keypoints: Vec<KeypointRecord>,
    pub decisions: Vec<RouteDecision>,
    pub failures: Vec<PipelineFailure>,
}

#[derive(Debug)]
enum StepError {
    Image(ResampleError),
    Backend(BackendError),
}

impl std::fmt::Display for StepError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Image(e) => e.fmt(f),
            Self::Backend(e) => e.fmt(f),
        }
    }
}

impl From<ResampleError> for StepError {
    fn from(e: ResampleError) -> Self {
        Self::Image(e)
    }
}

impl From<BackendError> for StepError {
    fn from(e: BackendError) -> Self {
        Self::Backend(e)
    }
}

type ImageResult = (Vec<KeypointRecord>, Vec<RouteDecision>);

/// Runs `f` per image on a pool of `workers` threads (all cores when
/// `None`), collects results in image-id order and enforces the failure
/// budget.
fn run_images<F>(images: &[ImageRecord], workers: Option<usize>, f: F) -> Result<PipelineOutput, PipelineError>
where
    F: Fn(&ImageRecord) -> Result<ImageResult, StepError> + Sync,
{
    let mut sorted: Vec<&ImageRecord> = images.iter().collect();
    sorted.sort_by_key(|im| im.id);
    let work = || -> Vec<(u64, Result<ImageResult, StepError>)> {
        sorted.par_iter().map(|im| (im.id, f(im))).collect()
    };
    let results = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PipelineError::Workers(e.to_string()))?
            .install(work),
        None => work(),
    };

    let mut out = PipelineOutput::default();
    for (image_id, result) in results {
        match result {
            Ok((keypoints, decisions)) => {
                out.keypoints.extend(keypoints);
                out.decisions.extend(decisions);
            }
            Err(e) => {
                log::warn!("image {image_id}: {e}");
                out.failures.push(PipelineFailure {
                    image_id,
                    error: e.to_string(),
                });
            }
        }
    }
    let (failed, total) = (out.failures.len(), images.len());
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(PipelineError::TooManyFailures { failed, total });
    }
    Ok(out)
}

fn estimate_checked(
    estimator: &dyn KeypointEstimator,
    image_id: u64,
    image: &RasterImage,
    boxes: &[BBox],
) -> Result<Vec<KeypointRecord>, BackendError> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let poses = estimator.estimate(image_id, image, boxes)?;
    if poses.len() != boxes.len() {
        return Err(BackendError::Output(format!(
            "keypoint backend returned {} poses for {} boxes",
            poses.len(),
            boxes.len()
        )));
    }
    Ok(poses
        .into_iter()
        .map(|p| KeypointRecord { image_id, ..p })
        .collect())
}

fn upscaled(sr: &dyn SrBackend, image_id: u64, image: &RasterImage, scale: u32) -> Result<RasterImage, BackendError> {
    if scale == 1 {
        Ok(image.clone())
    } else {
        sr.upscale(image_id, image, scale)
    }
}

/// The threshold-routed pipeline. Per image: upscale by `r`, detect on the
/// SR image, [`route`] every detection, then estimate keypoints once per
/// branch — SR boxes on the SR image, divided boxes on the original.
/// SR-branch keypoints are divided by `r`, so every output is in the
/// original image frame. Failed images are skipped and recorded.
pub fn run_pipeline(
    images: &[ImageRecord],
    source: &dyn ImageSource,
    config: &RouterConfig,
    backends: Backends,
    workers: Option<usize>,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let r = f64::from(config.scale);
    run_images(images, workers, |im| {
        let original = source.load(im)?;
        let sr = upscaled(backends.sr, im.id, &original, config.scale)?;
        let detections = backends.detector.detect(im.id, &sr)?;
        let decisions = route(&detections, config);

        let mut poses: Vec<Option<KeypointRecord>> = vec![None; decisions.len()];
        for branch in [Branch::Sr, Branch::Original] {
            let picked: Vec<usize> = (0..decisions.len())
                .filter(|&i| decisions[i].branch == branch)
                .collect();
            let boxes: Vec<BBox> = picked.iter().map(|&i| decisions[i].bbox).collect();
            let (image, back) = match branch {
                Branch::Sr => (&sr, 1.0 / r),
                Branch::Original => (&original, 1.0),
            };
            let found = estimate_checked(backends.keypoints, im.id, image, &boxes)?;
            for (i, p) in picked.into_iter().zip(found) {
                poses[i] = Some(if back == 1.0 { p } else { p.scaled(back) });
            }
        }
        Ok((poses.into_iter().flatten().collect(), decisions))
    })
}

/// Plain top-down run without routing: on the image upscaled by `scale`
/// (outputs divided back into the original frame), or on the original
/// image when `scale` is `None`.
pub fn run_topdown(
    images: &[ImageRecord],
    source: &dyn ImageSource,
    backends: Backends,
    scale: Option<u32>,
    workers: Option<usize>,
) -> Result<PipelineOutput, PipelineError> {
    run_images(images, workers, |im| {
        let original = source.load(im)?;
        let (image, back) = match scale {
            Some(r) => (upscaled(backends.sr, im.id, &original, r)?, 1.0 / f64::from(r)),
            None => (original, 1.0),
        };
        let boxes: Vec<BBox> = backends
            .detector
            .detect(im.id, &image)?
            .iter()
            .map(|d| d.bbox)
            .collect();
        let poses = estimate_checked(backends.keypoints, im.id, &image, &boxes)?;
        let poses = poses
            .into_iter()
            .map(|p| if back == 1.0 { p } else { p.scaled(back) })
            .collect();
        Ok((poses, Vec::new()))
    })
}

/// Keypoints from ground-truth boxes: one estimator call per image with the
/// boxes of all non-crowd persons (scaled by `r` when `sr` is given, with
/// outputs divided back). Images without persons are never sent.
pub fn run_gtbox_eval(
    dataset: &Dataset,
    source: &dyn ImageSource,
    sr: Option<(&dyn SrBackend, u32)>,
    estimator: &dyn KeypointEstimator,
    workers: Option<usize>,
) -> Result<PipelineOutput, PipelineError> {
    run_images(dataset.images(), workers, |im| {
        let boxes: Vec<BBox> = dataset
            .annotations_for_image(im.id)
            .filter(|a| !a.iscrowd)
            .map(|a| a.bbox)
            .collect();
        if boxes.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let original = source.load(im)?;
        let poses = match sr {
            Some((backend, r)) => {
                let image = upscaled(backend, im.id, &original, r)?;
                let rf = f64::from(r);
                let scaled: Vec<BBox> = boxes.iter().map(|b| b.scaled(rf)).collect();
                estimate_checked(estimator, im.id, &image, &scaled)?
                    .into_iter()
                    .map(|p| p.scaled(1.0 / rf))
                    .collect()
            }
            None => estimate_checked(estimator, im.id, &original, &boxes)?,
        };
        Ok((poses, Vec::new()))
    })
}
