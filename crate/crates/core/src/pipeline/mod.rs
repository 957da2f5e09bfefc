//! Threshold-routed top-down pose pipeline: super-resolve, detect on the SR
//! image, then run keypoints on the SR or the original image per person
//! depending on its initial segmentation area.

mod backend;
mod runner;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{BBox, DetectionRecord};

pub use backend::{
    BackendError, BuiltinBicubic, Detector, KeypointEstimator, ProcessBackend, SrBackend,
    BUILTIN_BICUBIC,
};
pub use runner::{
    run_gtbox_eval, run_pipeline, run_topdown, Backends, DirectorySource, ImageSource,
    MemorySource, PipelineFailure, PipelineOutput, MAX_FAILURE_FRACTION,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid router config: {0}")]
    InvalidConfig(String),
    #[error("{failed} of {total} images failed; aborting run")]
    TooManyFailures { failed: usize, total: usize },
    #[error("worker pool: {0}")]
    Workers(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Upscale ratio `r`.
    #[serde(default = "default_scale")]
    pub scale: u32,
    /// Initial-area threshold `T` in original-image pixels²; `null` is ∞.
    #[serde(default = "default_threshold", with = "crate::metrics::unbounded")]
    pub threshold: f64,
    #[serde(default = "default_sr")]
    pub sr_backend: String,
    #[serde(default)]
    pub detector: String,
    #[serde(default)]
    pub keypoint_estimator: String,
}

fn default_scale() -> u32 {
    4
}

fn default_threshold() -> f64 {
    3500.0
}

fn default_sr() -> String {
    BUILTIN_BICUBIC.to_string()
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            scale: default_scale(),
            threshold: default_threshold(),
            sr_backend: default_sr(),
            detector: String::new(),
            keypoint_estimator: String::new(),
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.scale < 2 {
            return Err(PipelineError::InvalidConfig(format!("scale must be at least 2, got {}", self.scale)));
        }
        if !(self.threshold >= 0.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "threshold must be non-negative, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Branch {
    Sr,
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaSource {
    Mask,
    /// The detector gave no mask area; `w·h` of the box was used.
    BoxFallback,
}

/// One routed detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub image_id: u64,
    /// Index of the detection within its image.
    pub detection_id: usize,
    pub score: f64,
    /// Area on the SR image.
    pub detected_area: f64,
    /// `detected_area / r²`.
    pub initial_area: f64,
    #[serde(with = "crate::metrics::unbounded")]
    pub threshold: f64,
    pub branch: Branch,
    /// Box in the chosen branch image's coordinates.
    pub bbox: BBox,
    pub area_source: AreaSource,
}

/// Routes detections made on the SR image. A person goes to the SR branch
/// iff its initial area is at most the threshold; otherwise its box is
/// divided by `r` and keypoints run on the original image. `detection_id`
/// counts per image in input order.
pub fn route(detections: &[DetectionRecord], config: &RouterConfig) -> Vec<RouteDecision> {
    let r = f64::from(config.scale);
    let mut counters = std::collections::BTreeMap::<u64, usize>::new();
    detections
        .iter()
        .map(|d| {
            let (detected_area, area_source) = match d.area {
                Some(a) => (a, AreaSource::Mask),
                None => {
                    log::warn!(
                        "image {}: detection without mask area; using box area",
                        d.image_id
                    );
                    (d.bbox.area(), AreaSource::BoxFallback)
                }
            };
            let initial_area = detected_area / (r * r);
            let branch = if initial_area <= config.threshold {
                Branch::Sr
            } else {
                Branch::Original
            };
            let bbox = match branch {
                Branch::Sr => d.bbox,
                Branch::Original => d.bbox.divided(r),
            };
            let counter = counters.entry(d.image_id).or_default();
            let detection_id = *counter;
            *counter += 1;
            RouteDecision {
                image_id: d.image_id,
                detection_id,
                score: d.score,
                detected_area,
                initial_area,
                threshold: config.threshold,
                branch,
                bbox,
                area_source,
            }
        })
        .collect()
}

/// Decisions ledger as JSON lines.
pub fn write_decisions(path: &Path, decisions: &[RouteDecision]) -> Result<(), PipelineError> {
    let io_err = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for d in decisions {
        let line = serde_json::to_string(d).expect("decision serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
