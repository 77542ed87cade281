//! Grid containers shared by every stage of the pipeline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A single band: a row-major grid of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterTile {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RasterTile {
    /// Builds a tile, rejecting empty shapes, length mismatches and NaN/Inf.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("raster tile", "non-empty grid", format!("{height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::shape(
                "raster tile",
                format!("{} values for {height}x{width}", height * width),
                format!("{} values", values.len()),
            ));
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { value, index });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds a tile from nested rows; convenient in tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(height * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::shape("raster rows", format!("{width} columns"), format!("{} columns", row.len())));
            }
            values.extend_from_slice(row);
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Smallest and largest value.
    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn require_same_shape(&self, other: &Self, what: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                what,
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// A binary mask whose pixels are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} pixels for {height}x{width}", height * width),
                format!("{} pixels", data.len()),
            ));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinary { value: f64::from(v), index });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    /// Converts a tile of physical values, accepting only exact 0.0 and 1.0.
    pub fn from_tile(tile: &RasterTile) -> Result<Self> {
        let mut data = Vec::with_capacity(tile.values().len());
        for (index, &value) in tile.values().iter().enumerate() {
            if value == 0.0 {
                data.push(0);
            } else if value == 1.0 {
                data.push(1);
            } else {
                return Err(Error::NonBinary { value, index });
            }
        }
        Ok(Self { height: tile.height(), width: tile.width(), data })
    }

    /// Pixels with `value >= threshold` become 1.
    pub fn threshold(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        let data = values.iter().map(|&v| u8::from(v >= threshold)).collect();
        Self::new(height, width, data)
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(height * width);
        for row in rows {
            data.extend_from_slice(row.as_ref());
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Self {
        debug_assert!(data.len() == height * width && data.iter().all(|&v| v <= 1));
        Self { height, width, data }
    }
}

/// A channels-first stack of bands, `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{} values for {channels}x{height}x{width}", channels * height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Stacks equally-shaped bands in the given order.
    pub fn from_bands(bands: &[RasterTile]) -> Result<Self> {
        let first = bands.first().ok_or(Error::Empty("band stack"))?;
        let mut data = Vec::with_capacity(bands.len() * first.values().len());
        for band in bands {
            first.require_same_shape(band, "band stack")?;
            data.extend_from_slice(band.values());
        }
        Ok(Self { channels: bands.len(), height: first.height(), width: first.width(), data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Row-major pixels of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }
}
