//! Gaussian keypoint heatmaps: encoding, peak decoding, L2 loss and a small
//! binary interchange format.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HeatmapError {
    #[error("heatmap grid must be at least 1×1 with a positive stride")]
    EmptyGrid,
    #[error("expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("heatmap values must be finite and at most 1")]
    BadValue,
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("heatmaps differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("truncated heatmap buffer")]
    Truncated,
}

/// Cell layout: `width × height` cells of `stride` input pixels each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub stride: f64,
}

impl Grid {
    pub fn new(width: usize, height: usize, stride: f64) -> Result<Self, HeatmapError> {
        if width == 0 || height == 0 || !(stride.is_finite() && stride > 0.0) {
            return Err(HeatmapError::EmptyGrid);
        }
        Ok(Self { width, height, stride })
    }

    /// Input-pixel position of a cell center.
    pub fn center(&self, col: usize, row: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.stride, (row as f64 + 0.5) * self.stride)
    }

    /// Default Gaussian width: two cells.
    pub fn default_sigma(&self) -> f64 {
        2.0 * self.stride
    }
}

/// Row-major confidence map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    grid: Grid,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, HeatmapError> {
        let expected = grid.width * grid.height;
        if values.len() != expected {
            return Err(HeatmapError::Length {
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v > 1.0) {
            return Err(HeatmapError::BadValue);
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.grid.width + col]
    }

    /// Little-endian `u32 width, u32 height, f32 stride`, then the values
    /// as `f32` in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(&(self.grid.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid.stride as f32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HeatmapError> {
        let word = |i: usize| -> Result<[u8; 4], HeatmapError> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| b.try_into().expect("4-byte slice"))
                .ok_or(HeatmapError::Truncated)
        };
        let width = u32::from_le_bytes(word(0)?) as usize;
        let height = u32::from_le_bytes(word(1)?) as usize;
        let stride = f64::from(f32::from_le_bytes(word(2)?));
        let grid = Grid::new(width, height, stride)?;
        let n = width * height;
        if bytes.len() != 12 + 4 * n {
            return Err(HeatmapError::Length {
                expected: n,
                actual: (bytes.len().saturating_sub(12)) / 4,
            });
        }
        let values = (0..n)
            .map(|i| word(3 + i).map(|w| f64::from(f32::from_le_bytes(w))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(grid, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub heatmap: Heatmap,
    /// The keypoint lies outside the grid; the map holds only the tail of
    /// its Gaussian.
    pub outside: bool,
}

/// Target map `exp(−‖center(c) − p‖² / 2σ²)` for a keypoint at `(x, y)`
/// input pixels, `σ` in input pixels.
pub fn encode(x: f64, y: f64, sigma: f64, grid: Grid) -> Result<Encoded, HeatmapError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(HeatmapError::Sigma(sigma));
    }
    let denom = 2.0 * sigma * sigma;
    let mut values = Vec::with_capacity(grid.width * grid.height);
    for row in 0..grid.height {
        for col in 0..grid.width {
            let (cx, cy) = grid.center(col, row);
            let d2 = (cx - x).powi(2) + (cy - y).powi(2);
            values.push((-d2 / denom).exp());
        }
    }
    let outside = !(x >= 0.0
        && y >= 0.0
        && x < grid.width as f64 * grid.stride
        && y < grid.height as f64 * grid.stride);
    Ok(Encoded {
        heatmap: Heatmap::new(grid, values)?,
        outside,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Argmax shifted a quarter cell toward the larger neighbour per axis.
    #[default]
    Refined,
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    /// The map was flat; the center cell was returned.
    pub degenerate: bool,
}

/// Peak location in input pixels. Ties go to the lowest `(row, col)`.
pub fn decode(map: &Heatmap, mode: DecodeMode) -> Peak {
    let g = map.grid;
    let v = &map.values;
    let mut best = 0;
    for (i, &value) in v.iter().enumerate() {
        if value > v[best] {
            best = i;
        }
    }
    let first = v[0];
    if v.iter().all(|&value| value == first) {
        let (x, y) = g.center((g.width - 1) / 2, (g.height - 1) / 2);
        return Peak {
            x,
            y,
            confidence: first,
            degenerate: true,
        };
    }
    let (col, row) = (best % g.width, best / g.width);
    let (mut x, mut y) = g.center(col, row);
    if mode == DecodeMode::Refined {
        let shift = |lo: f64, hi: f64| 0.25 * g.stride * (hi - lo).signum() * f64::from(hi != lo);
        if col > 0 && col + 1 < g.width {
            x += shift(map.get(col - 1, row), map.get(col + 1, row));
        }
        if row > 0 && row + 1 < g.height {
            y += shift(map.get(col, row - 1), map.get(col, row + 1));
        }
    }
    Peak {
        x,
        y,
        confidence: v[best],
        degenerate: false,
    }
}

/// Mean squared difference over cells.
pub fn l2_loss(predicted: &Heatmap, target: &Heatmap) -> Result<f64, HeatmapError> {
    let shape = |m: &Heatmap| (m.grid.width, m.grid.height);
    if shape(predicted) != shape(target) {
        return Err(HeatmapError::ShapeMismatch(shape(predicted), shape(target)));
    }
    let sum: f64 = predicted
        .values
        .iter()
        .zip(&target.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / predicted.values.len() as f64)
}
