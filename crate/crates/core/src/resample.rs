//! Cubic-convolution resampling, PSNR, and low-resolution dataset generation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{scale_annotations, scale_dimension, CocoError, Dataset, ImageRecord};

#[derive(Debug, Error)]
pub enum ResampleError {
    #[error("sample buffer holds {actual} values, expected {expected} for {width}x{height}x{channels}")]
    BadBuffer {
        width: u32,
        height: u32,
        channels: u8,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(u8),
    #[error("resample factor must be finite and positive, got {0}")]
    InvalidFactor(f64),
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32, u8), (u32, u32, u8)),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Coco(#[from] CocoError),
}

/// 8-bit raster in row-major, channel-interleaved order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    samples: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, samples: Vec<u8>) -> Result<Self, ResampleError> {
        if channels != 1 && channels != 3 {
            return Err(ResampleError::Channels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if width == 0 || height == 0 || samples.len() != expected {
            return Err(ResampleError::BadBuffer {
                width,
                height,
                channels,
                expected,
                actual: samples.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    /// Image filled with a single value.
    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self, ResampleError> {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn shape(&self) -> (u32, u32, u8) {
        (self.width, self.height, self.channels)
    }

    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize;
        self.samples[idx]
    }

    /// Loads any format the `image` crate decodes; grayscale stays single-channel,
    /// everything else becomes RGB.
    pub fn load(path: &Path) -> Result<Self, ResampleError> {
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => ResampleError::Io {
                path: path.to_path_buf(),
                source: e,
            },
            source => ResampleError::Codec {
                path: path.to_path_buf(),
                source,
            },
        })?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: image::DynamicImage) -> Self {
        use image::DynamicImage as D;
        match img {
            D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageLuma16(_) | D::ImageLumaA16(_) => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Self::new(w, h, 1, g.into_raw()).expect("decoder returns consistent buffers")
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::new(w, h, 3, rgb.into_raw()).expect("decoder returns consistent buffers")
            }
        }
    }

    /// Writes a lossless PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), ResampleError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.samples,
            self.width,
            self.height,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| ResampleError::Codec {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Scale factor plus cubic kernel sharpness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub factor: f64,
    /// Cubic-convolution parameter; −0.5 gives the Catmull-Rom kernel.
    #[serde(default = "default_sharpness")]
    pub a: f64,
}

fn default_sharpness() -> f64 {
    -0.5
}

impl ResampleSpec {
    pub fn new(factor: f64) -> Self {
        Self {
            factor,
            a: default_sharpness(),
        }
    }
}

/// Keys' cubic convolution kernel.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Weights of the four taps at integer offsets −1, 0, 1, 2 from the sample
/// floor, for fractional position `t` in `[0, 1)`.
pub fn cubic_weights(t: f64, a: f64) -> [f64; 4] {
    [
        cubic_kernel(1.0 + t, a),
        cubic_kernel(t, a),
        cubic_kernel(1.0 - t, a),
        cubic_kernel(2.0 - t, a),
    ]
}

struct Taps {
    index: [usize; 4],
    weight: [f64; 4],
}

fn taps(out_len: u32, in_len: u32, factor: f64, a: f64) -> Vec<Taps> {
    let last = in_len as i64 - 1;
    (0..out_len)
        .map(|dst| {
            let src = (f64::from(dst) + 0.5) / factor - 0.5;
            let base = src.floor();
            let weight = cubic_weights(src - base, a);
            let base = base as i64;
            let mut index = [0usize; 4];
            for (k, slot) in index.iter_mut().enumerate() {
                *slot = (base - 1 + k as i64).clamp(0, last) as usize;
            }
            Taps { index, weight }
        })
        .collect()
}

/// Resamples by `spec.factor` using separable 4×4 cubic convolution with
/// edge-clamped addressing and center-aligned coordinates.
pub fn resample(image: &RasterImage, spec: &ResampleSpec) -> Result<RasterImage, ResampleError> {
    if !(spec.factor.is_finite() && spec.factor > 0.0) {
        return Err(ResampleError::InvalidFactor(spec.factor));
    }
    let (w, h, c) = (image.width, image.height, image.channels as usize);
    let out_w = scale_dimension(w, spec.factor);
    let out_h = scale_dimension(h, spec.factor);
    let xt = taps(out_w, w, spec.factor, spec.a);
    let yt = taps(out_h, h, spec.factor, spec.a);

    // Horizontal pass into a float buffer of h × out_w × c.
    let row_len = w as usize * c;
    let mut horiz = vec![0.0f64; h as usize * out_w as usize * c];
    for (row, out_row) in image
        .samples
        .chunks_exact(row_len)
        .zip(horiz.chunks_exact_mut(out_w as usize * c))
    {
        for (tap, out_px) in xt.iter().zip(out_row.chunks_exact_mut(c)) {
            for (ch, out) in out_px.iter_mut().enumerate() {
                *out = tap
                    .index
                    .iter()
                    .zip(tap.weight)
                    .map(|(&i, wt)| wt * f64::from(row[i * c + ch]))
                    .sum();
            }
        }
    }

    let stride = out_w as usize * c;
    let mut samples = Vec::with_capacity(out_h as usize * stride);
    for tap in &yt {
        for i in 0..stride {
            let v: f64 = tap
                .index
                .iter()
                .zip(tap.weight)
                .map(|(&r, wt)| wt * horiz[r * stride + i])
                .sum();
            samples.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(out_w, out_h, image.channels, samples)
}

/// Peak signal-to-noise ratio in dB for 8-bit data; `+∞` when the images match.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64, ResampleError> {
    if a.shape() != b.shape() {
        return Err(ResampleError::ShapeMismatch(a.shape(), b.shape()));
    }
    let sse: f64 = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    let mse = sse / a.samples.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub factor: f64,
}

/// Image id → written file.
pub type ImageManifest = BTreeMap<u64, ManifestEntry>;

#[derive(Debug)]
pub struct ImageFailure {
    pub image_id: u64,
    pub error: ResampleError,
}

/// Outcome of [`build_lr_dataset`].
#[derive(Debug)]
pub struct LrDataset {
    pub dataset: Dataset,
    pub manifest: ImageManifest,
    pub failures: Vec<ImageFailure>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";

/// Writes a rescaled copy of `dataset` and its images under `out_dir`.
///
/// Layout: `images/` holds the resampled files (PNG, or a byte copy of the
/// source when `factor == 1`), `annotations.json` the scaled annotations and
/// `manifest.json` the id → file map. Images that fail to load or write are
/// reported in [`LrDataset::failures`] and skipped; the rest still run.
pub fn build_lr_dataset(
    dataset: &Dataset,
    image_dir: &Path,
    factor: f64,
    out_dir: &Path,
) -> Result<LrDataset, ResampleError> {
    if !(factor.is_finite() && factor > 0.0 && factor <= 1.0) {
        return Err(ResampleError::InvalidFactor(factor));
    }
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ResampleError::Io { path, source }
    };
    let images_out = out_dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_out).map_err(io_err(&images_out))?;

    let spec = ResampleSpec::new(factor);
    let outcomes: Vec<(u64, Result<ManifestEntry, ResampleError>)> = dataset
        .images()
        .par_iter()
        .map(|im| (im.id, downsample_one(im, image_dir, &images_out, &spec)))
        .collect();

    let mut manifest = ImageManifest::new();
    let mut failures = Vec::new();
    let mut renamed = BTreeMap::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(entry) => {
                renamed.insert(id, entry.path.clone());
                manifest.insert(id, entry);
            }
            Err(error) => {
                log::warn!("image {id}: {error}");
                failures.push(ImageFailure { image_id: id, error });
            }
        }
    }

    let scaled = scale_annotations(dataset, factor)?;
    let images = scaled
        .images()
        .iter()
        .map(|im| ImageRecord {
            file_name: renamed.get(&im.id).cloned().unwrap_or_else(|| im.file_name.clone()),
            ..im.clone()
        })
        .collect();
    let scaled = Dataset::assemble(images, scaled.annotations().to_vec(), scaled.person_category().clone());

    let ann_path = out_dir.join(ANNOTATIONS_FILE);
    scaled.write(&ann_path)?;
    let man_path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&man_path, text).map_err(io_err(&man_path))?;

    Ok(LrDataset {
        dataset: scaled,
        manifest,
        failures,
    })
}

fn downsample_one(
    im: &ImageRecord,
    image_dir: &Path,
    images_out: &Path,
    spec: &ResampleSpec,
) -> Result<ManifestEntry, ResampleError> {
    let src = image_dir.join(&im.file_name);
    let rel = if spec.factor == 1.0 {
        PathBuf::from(&im.file_name)
    } else {
        Path::new(&im.file_name).with_extension("png")
    };
    let dst = images_out.join(&rel);
    if let Some(parent) = dst.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ResampleError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let (width, height) = if spec.factor == 1.0 {
        std::fs::copy(&src, &dst).map_err(|source| ResampleError::Io {
            path: src.clone(),
            source,
        })?;
        (im.width, im.height)
    } else {
        let img = RasterImage::load(&src)?;
        let out = resample(&img, spec)?;
        out.save_png(&dst)?;
        (out.width, out.height)
    };
    Ok(ManifestEntry {
        path: rel.to_string_lossy().replace('\\', "/"),
        width,
        height,
        factor: spec.factor,
    })
}
