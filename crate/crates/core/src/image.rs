//! Minimal RGB image container used throughout the pipeline.

use crate::error::{invalid_input, Result};

/// Row-major H×W×3 image with channel values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid_input(format!("degenerate image dims {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(invalid_input(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel-center coordinates (pixel `i` has
    /// its center at `i`). Points outside the image read `fill`.
    pub fn sample_bilinear(&self, x: f32, y: f32, fill: [f32; 3]) -> [f32; 3] {
        let (w, h) = (self.width as f32, self.height as f32);
        if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
            return fill;
        }
        let xc = x.clamp(0.0, w - 1.0);
        let yc = y.clamp(0.0, h - 1.0);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * fx;
            let bot = p01[c] + (p11[c] - p01[c]) * fx;
            out[c] = top + (bot - top) * fy;
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits a square image into `patch×patch` tiles in raster order. Each
    /// tile is flattened as (row, col, channel), giving `3·patch²` values.
    pub fn patchify(&self, patch: usize) -> Result<Vec<Vec<f64>>> {
        if patch == 0 || !self.width.is_multiple_of(patch) || !self.height.is_multiple_of(patch) {
            return Err(invalid_input(format!(
                "{}x{} image is not divisible into {patch}px patches",
                self.width, self.height
            )));
        }
        let (gw, gh) = (self.width / patch, self.height / patch);
        let mut out = Vec::with_capacity(gw * gh);
        for pr in 0..gh {
            for pc in 0..gw {
                let mut tile = Vec::with_capacity(3 * patch * patch);
                for y in 0..patch {
                    let row = (pr * patch + y) * self.width + pc * patch;
                    let s = &self.data[row * 3..(row + patch) * 3];
                    tile.extend(s.iter().map(|&v| v as f64));
                }
                out.push(tile);
            }
        }
        Ok(out)
    }

    /// Writes one flattened tile back into patch position `index`.
    pub fn write_patch(&mut self, patch: usize, index: usize, tile: &[f64]) {
        let gw = self.width / patch;
        let (pr, pc) = (index / gw, index % gw);
        for y in 0..patch {
            for x in 0..patch {
                let t = (y * patch + x) * 3;
                self.set_pixel(
                    pc * patch + x,
                    pr * patch + y,
                    [tile[t] as f32, tile[t + 1] as f32, tile[t + 2] as f32],
                );
            }
        }
    }
}
