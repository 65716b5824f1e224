//! Carriers shared by the attention modules: feature maps, prototypes and
//! masks.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// D×H×W encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        if !t.is_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self(t))
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![channels, height, width], data)?)
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at3(c, y, x)
    }

    /// Feature vector at pixel `(y, x)` across channels.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels()).map(|c| self.get(c, y, x)).collect()
    }

    /// N×D matrix with one row per pixel in row-major pixel order.
    pub fn pixel_rows(&self) -> Tensor {
        let (d, n) = (self.channels(), self.pixels());
        self.0
            .reshape(vec![d, n])
            .and_then(|t| t.transpose())
            .expect("feature map is rank 3")
    }

    /// Inverse of [`FeatureMap::pixel_rows`].
    pub fn from_pixel_rows(rows: &Tensor, height: usize, width: usize) -> Result<Self> {
        let (n, d) = rows.dims2()?;
        if n != height * width {
            return Err(Error::Shape(format!("{n} rows for a {height}x{width} map")));
        }
        Self::new(rows.transpose()?.reshape(vec![d, height, width])?)
    }
}

/// A D-vector summarizing a region.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype(pub Vec<f64>);

impl Prototype {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Put a D×H×W map on the tape as an N×D pixel-row matrix.
pub fn map_to_rows(tape: &mut Tape, map: Var) -> Result<Var> {
    let (d, h, w) = tape.value(map).dims3()?;
    let flat = tape.reshape(map, vec![d, h * w])?;
    tape.transpose(flat)
}

/// N×D pixel rows back to a D×H×W map.
pub fn rows_to_map(tape: &mut Tape, rows: Var, height: usize, width: usize) -> Result<Var> {
    let (n, d) = tape.value(rows).dims2()?;
    if n != height * width {
        return Err(Error::Shape(format!("{n} rows for a {height}x{width} map")));
    }
    let t = tape.transpose(rows)?;
    tape.reshape(t, vec![d, height, width])
}

/// H×W mask: binary at image scale, fractional after pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_bools(height: usize, width: usize, on: &[bool]) -> Result<Self> {
        Self::new(height, width, on.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_on(&self, y: usize, x: usize) -> bool {
        self.get(y, x) > 0.0
    }

    /// Sum of mask values (pixel count for a binary mask).
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn count_on(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// Flat indices of pixels with a nonzero value.
    pub fn on_indices(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i] > 0.0).collect()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Area average over `fh×fw` blocks.
    pub fn downsample(&self, fh: usize, fw: usize) -> Result<Mask> {
        if fh == 0 || fw == 0 || self.height % fh != 0 || self.width % fw != 0 {
            return Err(Error::InvalidArgument(format!(
                "block {fh}x{fw} does not divide mask {}x{}",
                self.height, self.width
            )));
        }
        let t = Tensor::new(vec![self.height, self.width], self.values.clone())?;
        let pooled = crate::numerics::avg_pool2d(&t, (fh, fw))?;
        Mask::new(self.height / fh, self.width / fw, pooled.into_data())
    }

    /// Binary mask with 1 wherever this mask exceeds `threshold`.
    pub fn threshold(&self, threshold: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
        }
    }
}
