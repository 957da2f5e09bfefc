//! Bounding boxes, polygon and run-length-encoded mask geometry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices (got {coords} coordinates)")]
    DegeneratePolygon { coords: usize },
    #[error("run-length counts cover {covered} pixels but the grid holds {expected}")]
    CountMismatch { covered: u64, expected: u64 },
    #[error("malformed compressed RLE string at byte {0}")]
    MalformedRle(usize),
}

/// Axis-aligned box in `(x, y, w, h)` pixel form, serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.x * factor, self.y * factor, self.w * factor, self.h * factor)
    }

    /// Divides all four components by `divisor`.
    pub fn divided(&self, divisor: f64) -> Self {
        Self::new(self.x / divisor, self.y / divisor, self.w / divisor, self.h / divisor)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Overlap area with another box; zero when disjoint.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let ih = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Absolute shoelace area of a single polygon given as `[x0, y0, x1, y1, ...]`.
pub fn polygon_area(polygon: &[f64]) -> Result<f64, GeometryError> {
    if polygon.len() < 6 || !polygon.len().is_multiple_of(2) {
        return Err(GeometryError::DegeneratePolygon {
            coords: polygon.len(),
        });
    }
    let n = polygon.len() / 2;
    let mut twice = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        let (xi, yi) = (polygon[2 * i], polygon[2 * i + 1]);
        let (xj, yj) = (polygon[2 * j], polygon[2 * j + 1]);
        twice += xi * yj - xj * yi;
    }
    Ok(twice.abs() * 0.5)
}

/// Sum of component areas of a multi-polygon segmentation.
pub fn multi_polygon_area(polygons: &[Vec<f64>]) -> Result<f64, GeometryError> {
    polygons.iter().map(|p| polygon_area(p)).sum()
}

/// Tight bounding box of a multi-polygon, or `None` when it has no vertices.
pub fn polygons_bbox(polygons: &[Vec<f64>]) -> Option<BBox> {
    let mut xs = polygons.iter().flat_map(|p| p.iter().step_by(2));
    let first = *xs.next()?;
    let (mut x0, mut x1) = (first, first);
    for &x in xs {
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let mut ys = polygons.iter().flat_map(|p| p.iter().skip(1).step_by(2));
    let first = *ys.next()?;
    let (mut y0, mut y1) = (first, first);
    for &y in ys {
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
}

/// Uncompressed COCO run-length encoding.
///
/// Runs alternate background/foreground starting with background and walk
/// the grid in column-major order, as in the reference mask API.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rle {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self, GeometryError> {
        let rle = Self {
            height,
            width,
            counts,
        };
        rle.check()?;
        Ok(rle)
    }

    fn check(&self) -> Result<(), GeometryError> {
        let covered: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        let expected = u64::from(self.height) * u64::from(self.width);
        if covered != expected {
            return Err(GeometryError::CountMismatch { covered, expected });
        }
        Ok(())
    }

    /// Decodes the compressed string form used by the reference mask API.
    pub fn from_compressed(height: u32, width: u32, s: &str) -> Result<Self, GeometryError> {
        let bytes = s.as_bytes();
        let mut counts: Vec<i64> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0;
            loop {
                let Some(&b) = bytes.get(p) else {
                    return Err(GeometryError::MalformedRle(p));
                };
                let c = i64::from(b) - 48;
                if !(0..64).contains(&c) || k > 12 {
                    return Err(GeometryError::MalformedRle(p));
                }
                x |= (c & 0x1f) << (5 * k);
                let more = c & 0x20 != 0;
                p += 1;
                k += 1;
                if !more {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
            }
            if counts.len() > 2 {
                x += counts[counts.len() - 2];
            }
            counts.push(x);
        }
        let counts = counts
            .into_iter()
            .map(|c| u32::try_from(c).map_err(|_| GeometryError::MalformedRle(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(height, width, counts)
    }

    /// Encodes into the compressed string form.
    pub fn to_compressed(&self) -> String {
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let mut x = i64::from(c);
            if i > 2 {
                x -= i64::from(self.counts[i - 2]);
            }
            loop {
                let mut ch = x & 0x1f;
                x >>= 5;
                let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    ch |= 0x20;
                }
                out.push(char::from((ch + 48) as u8));
                if !more {
                    break;
                }
            }
        }
        out
    }

    /// Column-major binary mask, `true` for foreground.
    pub fn decode(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.height as usize * self.width as usize);
        for (i, &run) in self.counts.iter().enumerate() {
            mask.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
        mask
    }

    /// Encodes a column-major mask of the given grid size.
    pub fn encode(height: u32, width: u32, mask: &[bool]) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &m in mask {
            if m != current {
                counts.push(run);
                run = 0;
                current = m;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            height,
            width,
            counts,
        }
    }

    /// Nearest-neighbour resample of the mask onto a `new_height × new_width` grid.
    pub fn resized(&self, new_height: u32, new_width: u32) -> Self {
        let src = self.decode();
        let (sh, sw) = (self.height as usize, self.width as usize);
        let fy = new_height as f64 / self.height.max(1) as f64;
        let fx = new_width as f64 / self.width.max(1) as f64;
        let mut out = Vec::with_capacity(new_height as usize * new_width as usize);
        for col in 0..new_width as usize {
            let sc = (((col as f64 + 0.5) / fx).floor() as usize).min(sw.saturating_sub(1));
            for row in 0..new_height as usize {
                let sr = (((row as f64 + 0.5) / fy).floor() as usize).min(sh.saturating_sub(1));
                out.push(sw > 0 && sh > 0 && src[sc * sh + sr]);
            }
        }
        Self::encode(new_height, new_width, &out)
    }
}

/// Foreground pixel count of a run-length encoding.
pub fn rle_area(rle: &Rle) -> Result<f64, GeometryError> {
    rle.check()?;
    let fg: u64 = rle
        .counts
        .iter()
        .skip(1)
        .step_by(2)
        .map(|&c| u64::from(c))
        .sum();
    Ok(fg as f64)
}
