//! Image normalization and rigid-grid patch decomposition.
//!
//! Decoding files into pixels lives in the companion std crate; here an
//! `Image` is already a buffer of floats in [0,1].

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// An in-memory image, interleaved channels, pixel values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(CoreError::Config(
                "image must have 1 or 3 channels".to_string(),
            ));
        }
        if pixels.len() != width * height * channels {
            return Err(CoreError::Dimension(
                "pixel buffer does not match image dimensions".to_string(),
            ));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(CoreError::Config(
                "pixel values must lie in [0,1]".to_string(),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear resize with corner alignment and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut pixels = vec![0.0; width * height * self.channels];
        for y in 0..height {
            let sy = if height > 1 && self.height > 1 {
                y as f64 * (self.height - 1) as f64 / (height - 1) as f64
            } else {
                0.0
            };
            let y0 = libm::floor(sy) as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f64;
            for x in 0..width {
                let sx = if width > 1 && self.width > 1 {
                    x as f64 * (self.width - 1) as f64 / (width - 1) as f64
                } else {
                    0.0
                };
                let x0 = libm::floor(sx) as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f64;
                for c in 0..self.channels {
                    let v = self.at(x0, y0, c) * (1.0 - fx) * (1.0 - fy)
                        + self.at(x1, y0, c) * fx * (1.0 - fy)
                        + self.at(x0, y1, c) * (1.0 - fx) * fy
                        + self.at(x1, y1, c) * fx * fy;
                    pixels[(y * width + x) * self.channels + c] = v;
                }
            }
        }
        Image {
            width,
            height,
            channels: self.channels,
            pixels,
        }
    }

    /// Averages RGB channels into a single one; grayscale passes through.
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks(3)
            .map(|c| (c[0] + c[1] + c[2]) / 3.0)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }
}

/// Rigid grid dimensions: `rows` x `cols` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(CoreError::Config(
                "grid must be at least 2x2".to_string(),
            ));
        }
        Ok(GridSpec { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// The rigid-grid decomposition of one image: `rows * cols` flattened
/// patch vectors of identical length.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub spec: GridSpec,
    pub patch_len: usize,
    patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        &self.patches[row * self.spec.cols + col]
    }

    pub fn patches(&self) -> &[Vec<f64>] {
        &self.patches
    }
}

/// Resizes the image to `target_side` x `target_side` and cuts it into a
/// `spec.rows` x `spec.cols` grid of non-overlapping patches, each
/// flattened row-major (pixel-major, channels interleaved).
pub fn decompose(img: &Image, spec: GridSpec, target_side: usize) -> Result<PatchGrid> {
    if target_side % spec.rows != 0 || target_side % spec.cols != 0 {
        return Err(CoreError::Config(format!(
            "target side {target_side} not divisible by grid {}x{}",
            spec.rows, spec.cols
        )));
    }
    let resized = img.resize(target_side, target_side);
    let ph = target_side / spec.rows;
    let pw = target_side / spec.cols;
    let patch_len = ph * pw * resized.channels;
    let mut patches = Vec::with_capacity(spec.cells());
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let mut v = Vec::with_capacity(patch_len);
            for y in r * ph..(r + 1) * ph {
                for x in c * pw..(c + 1) * pw {
                    for ch in 0..resized.channels {
                        v.push(resized.at(x, y, ch));
                    }
                }
            }
            patches.push(v);
        }
    }
    Ok(PatchGrid {
        spec,
        patch_len,
        patches,
    })
}
