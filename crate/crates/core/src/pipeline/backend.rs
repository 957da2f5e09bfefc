use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use crate::coco::{
    parse_detections, parse_keypoint_results, write_detections, BBox, CocoError, DetectionRecord,
    KeypointRecord,
};
use crate::resample::{resample, RasterImage, ResampleError, ResampleSpec};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cannot start backend {exe}: {source}")]
    Spawn {
        exe: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend task {task} failed ({status}): {stderr}")]
    Failed {
        task: &'static str,
        status: String,
        stderr: String,
    },
    #[error("backend output: {0}")]
    Output(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ResampleError),
    #[error(transparent)]
    Coco(#[from] CocoError),
}

/// Super-resolution engine.
pub trait SrBackend: Sync {
    fn id(&self) -> String;
    fn upscale(&self, image_id: u64, image: &RasterImage, scale: u32) -> Result<RasterImage, BackendError>;
}

/// Person detector; instance-segmentation detectors fill `area`.
pub trait Detector: Sync {
    fn id(&self) -> String;
    fn detect(&self, image_id: u64, image: &RasterImage) -> Result<Vec<DetectionRecord>, BackendError>;
}

/// Top-down keypoint estimator: one pose per box, in box order, in the
/// coordinates of `image`.
pub trait KeypointEstimator: Sync {
    fn id(&self) -> String;
    fn estimate(
        &self,
        image_id: u64,
        image: &RasterImage,
        boxes: &[BBox],
    ) -> Result<Vec<KeypointRecord>, BackendError>;
}

/// Cubic-convolution upscaling, the "Bicubic" baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinBicubic;

pub const BUILTIN_BICUBIC: &str = "bicubic";

impl SrBackend for BuiltinBicubic {
    fn id(&self) -> String {
        BUILTIN_BICUBIC.to_string()
    }

    fn upscale(&self, _image_id: u64, image: &RasterImage, scale: u32) -> Result<RasterImage, BackendError> {
        Ok(resample(image, &ResampleSpec::new(f64::from(scale)))?)
    }
}

/// External executable speaking the file protocol:
///
/// ```text
/// <exe> --task {upscale|detect|keypoints} --input <dir-or-file> --output <file>
///       [--scale r] [--boxes <file>]
/// ```
///
/// Images are exchanged as `<image_id>.png`. `upscale` reads a directory and
/// writes the same file names into the `--output` directory; `detect` and
/// `keypoints` write COCO results JSON. Any nonzero exit is a failure and
/// stderr is kept as the message.
#[derive(Debug, Clone)]
pub struct ProcessBackend {
    exe: PathBuf,
    args: Vec<String>,
    envs: Vec<(String, String)>,
}

impl ProcessBackend {
    pub fn new(exe: impl Into<PathBuf>) -> Self {
        Self {
            exe: exe.into(),
            args: Vec::new(),
            envs: Vec::new(),
        }
    }

    /// Extra arguments passed before the protocol flags.
    pub fn with_args(mut self, args: Vec<String>) -> Self {
        self.args = args;
        self
    }

    /// Extra environment variables for every invocation.
    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.envs.push((key.into(), value.into()));
        self
    }

    pub fn exe(&self) -> &Path {
        &self.exe
    }

    fn run(&self, task: &'static str, input: &Path, output: &Path, extra: &[(&str, String)]) -> Result<(), BackendError> {
        let mut cmd = Command::new(&self.exe);
        cmd.envs(self.envs.iter().map(|(k, v)| (k, v)))
            .args(&self.args)
            .arg("--task")
            .arg(task)
            .arg("--input")
            .arg(input)
            .arg("--output")
            .arg(output);
        for (flag, value) in extra {
            cmd.arg(flag).arg(value);
        }
        log::debug!("running {cmd:?}");
        let out = cmd.output().map_err(|source| BackendError::Spawn {
            exe: self.exe.clone(),
            source,
        })?;
        if out.status.success() {
            Ok(())
        } else {
            Err(BackendError::Failed {
                task,
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            })
        }
    }

    /// Upscales every image in `input_dir` into `output_dir` with one call.
    pub fn upscale_dir(&self, input_dir: &Path, output_dir: &Path, scale: u32) -> Result<(), BackendError> {
        fs::create_dir_all(output_dir)?;
        self.run("upscale", input_dir, output_dir, &[("--scale", scale.to_string())])
    }

    fn stage(image_id: u64, image: &RasterImage) -> Result<(tempfile::TempDir, PathBuf), BackendError> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join(format!("{image_id}.png"));
        image.save_png(&path)?;
        Ok((dir, path))
    }
}

fn image_name(exe: &Path) -> String {
    exe.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| exe.display().to_string())
}

impl SrBackend for ProcessBackend {
    fn id(&self) -> String {
        image_name(&self.exe)
    }

    fn upscale(&self, image_id: u64, image: &RasterImage, scale: u32) -> Result<RasterImage, BackendError> {
        let dir = tempfile::tempdir()?;
        let input = dir.path().join("in");
        let output = dir.path().join("out");
        fs::create_dir_all(&input)?;
        let name = format!("{image_id}.png");
        image.save_png(&input.join(&name))?;
        self.upscale_dir(&input, &output, scale)?;
        let out = RasterImage::load(&output.join(&name))?;
        let expected = (image.width() * scale, image.height() * scale);
        if (out.width(), out.height()) != expected {
            return Err(BackendError::Output(format!(
                "upscaled image {image_id} is {}x{}, expected {}x{}",
                out.width(),
                out.height(),
                expected.0,
                expected.1
            )));
        }
        Ok(out)
    }
}

impl Detector for ProcessBackend {
    fn id(&self) -> String {
        image_name(&self.exe)
    }

    fn detect(&self, image_id: u64, image: &RasterImage) -> Result<Vec<DetectionRecord>, BackendError> {
        let (dir, input) = Self::stage(image_id, image)?;
        let output = dir.path().join("detections.json");
        self.run("detect", &input, &output, &[])?;
        let dets = parse_detections(&fs::read_to_string(&output)?, None)?;
        if let Some(d) = dets.iter().find(|d| d.image_id != image_id) {
            return Err(BackendError::Output(format!(
                "detection for image {} returned while processing image {image_id}",
                d.image_id
            )));
        }
        Ok(dets)
    }
}

impl KeypointEstimator for ProcessBackend {
    fn id(&self) -> String {
        image_name(&self.exe)
    }

    fn estimate(
        &self,
        image_id: u64,
        image: &RasterImage,
        boxes: &[BBox],
    ) -> Result<Vec<KeypointRecord>, BackendError> {
        let (dir, input) = Self::stage(image_id, image)?;
        let boxes_path = dir.path().join("boxes.json");
        let records: Vec<DetectionRecord> = boxes
            .iter()
            .map(|&bbox| DetectionRecord {
                image_id,
                bbox,
                score: 1.0,
                area: None,
            })
            .collect();
        write_detections(&boxes_path, &records)?;
        let output = dir.path().join("keypoints.json");
        self.run(
            "keypoints",
            &input,
            &output,
            &[("--boxes", boxes_path.display().to_string())],
        )?;
        let poses = parse_keypoint_results(&fs::read_to_string(&output)?, None)?;
        if poses.iter().any(|p| p.image_id != image_id) {
            return Err(BackendError::Output(format!(
                "keypoints for another image returned while processing image {image_id}"
            )));
        }
        Ok(poses)
    }
}
