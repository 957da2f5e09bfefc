//! Evaluation toolkit for super-resolution-assisted human pose estimation:
//! COCO data handling, bicubic resampling, OKS/IoU metrics, area-subgroup
//! analysis, heatmap coding and a threshold-routed top-down pipeline.

pub mod coco;
pub mod heatmap;
pub mod metrics;
pub mod pipeline;
pub mod resample;
pub mod subgroup;
