//! Plain row-major image and depth buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Depth recorded where no primitive is hit.
pub const BACKGROUND_DEPTH: f32 = 1.0e6;

/// Interleaved RGB, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

pub fn quantize_u8(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Camera-frame z-depth per pixel; `BACKGROUND_DEPTH` where nothing is hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![BACKGROUND_DEPTH; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn is_valid_value(d: f32) -> bool {
        d.is_finite() && d > 0.0 && d < BACKGROUND_DEPTH * 0.5
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&d| Self::is_valid_value(d)).collect()
    }

    pub fn coverage(&self) -> f64 {
        let n = self.data.iter().filter(|&&d| Self::is_valid_value(d)).count();
        n as f64 / self.data.len().max(1) as f64
    }

    /// Depth at continuous pixel coordinates, interpolating inverse depth
    /// bilinearly between the four surrounding pixel centers. `None` when any
    /// of them is invalid or the point falls outside the center lattice.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        let x = u - 0.5;
        let y = v - 0.5;
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (x0, y0) = (libm::floor(x) as usize, libm::floor(y) as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        if x0 >= self.width || y0 >= self.height {
            return None;
        }
        if x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut acc = 0.0;
        for (r, c, w) in [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ] {
            let d = self.get(r, c);
            if w > 0.0 {
                if !Self::is_valid_value(d) {
                    return None;
                }
                acc += w / d as f64;
            }
        }
        if acc > 0.0 {
            Some(1.0 / acc)
        } else {
            None
        }
    }
}
