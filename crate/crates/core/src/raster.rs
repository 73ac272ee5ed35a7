//! Image and label rasters.

use crate::error::{Error, Result};

/// Pixels carrying this label are excluded from losses, metrics and class presence.
pub const IGNORE_LABEL: u8 = 255;

/// Row-major H×W×3 image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::shape(
                "image",
                &[height, width, Self::CHANNELS],
                &[data.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let o = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[o..o + w * 3]);
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }
}

/// Row-major H×W class-id raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", &[height, width], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    /// Builds a mask from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::op("mask", "ragged rows"));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Mask {
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            let o = y * self.width + x0;
            data.extend_from_slice(&self.data[o..o + w]);
        }
        Mask {
            height: h,
            width: w,
            data,
        }
    }

    /// Sorted distinct class ids, ignore label excluded.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..=254u8).filter(|&c| seen[c as usize]).collect()
    }
}
