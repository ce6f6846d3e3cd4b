//! Dense raster types shared by every module.

use crate::error::{Error, Result};

/// An `H×W×C` raster of reals, stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImagePlane {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} plane",
                data.len()
            )));
        }
        Ok(ImagePlane {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        ImagePlane {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copies the `h×w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in row..row + h {
            let start = (y * self.width + col) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(ImagePlane {
            height: h,
            width: w,
            channels: self.channels,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Quantizes a plane with values in `[0, 1]` to interleaved 8-bit samples.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_vec(height, width, channels, data)
    }
}

/// A per-pixel `{0, 1}` grid. Used both for inpainting masks (0 = removed)
/// and for road masks (1 = road).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} mask",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Shape(format!("mask value {v} is not 0 or 1")));
        }
        Ok(BinaryMask {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.values[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.values.len() - self.count_ones()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1 - v).collect(),
        }
    }

    /// Element-wise product of two masks.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "{}x{} mask combined with {}x{} mask",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a & b).collect(),
        })
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(BinaryMask::from_fn(h, w, |y, x| self.get(row + y, col + x) == 1))
    }
}

/// A per-pixel class-index grid, used for multi-class labels and predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl ClassMap {
    pub fn from_vec(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} class map",
                classes.len()
            )));
        }
        Ok(ClassMap {
            height,
            width,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        ClassMap {
            height,
            width,
            classes: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn max_class(&self) -> u8 {
        self.classes.iter().copied().max().unwrap_or(0)
    }

    /// Pixels equal to `class` become 1.
    pub fn to_mask(&self, class: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.classes.iter().map(|&c| (c == class) as u8).collect(),
        }
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut classes = Vec::with_capacity(h * w);
        for y in row..row + h {
            classes.extend_from_slice(&self.classes[y * self.width + col..y * self.width + col + w]);
        }
        Ok(ClassMap {
            height: h,
            width: w,
            classes,
        })
    }
}

impl From<&BinaryMask> for ClassMap {
    fn from(mask: &BinaryMask) -> Self {
        ClassMap {
            height: mask.height,
            width: mask.width,
            classes: mask.values.clone(),
        }
    }
}
