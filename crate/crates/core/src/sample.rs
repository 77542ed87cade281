use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use chrono::NaiveDate;

use crate::{Error, Image, Mask};

/// Source sensor of a tile. Each sensor gets its own model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sensor {
    Landsat8,
    Sentinel1,
}

/// Landsat-8 surface reflectance and surface temperature bands, in stacking order.
pub const LANDSAT8_BANDS: [&str; 8] = ["SR_B1", "SR_B2", "SR_B3", "SR_B4", "SR_B5", "SR_B6", "SR_B7", "ST_B10"];

/// Sentinel-1 polarizations, in stacking order. A VV/VH ratio band is appended during preprocessing.
pub const SENTINEL1_BANDS: [&str; 2] = ["VV", "VH"];

impl Sensor {
    pub fn bands(self) -> &'static [&'static str] {
        match self {
            Sensor::Landsat8 => &LANDSAT8_BANDS,
            Sensor::Sentinel1 => &SENTINEL1_BANDS,
        }
    }

    /// Channels of a preprocessed sample.
    pub fn channels(self) -> usize {
        match self {
            Sensor::Landsat8 => 8,
            Sensor::Sentinel1 => 3,
        }
    }

    pub fn is_optical(self) -> bool {
        matches!(self, Sensor::Landsat8)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sensor::Landsat8 => "landsat8",
            Sensor::Sentinel1 => "sentinel1",
        }
    }
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sensor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "landsat8" | "landsat-8" | "l8" => Ok(Sensor::Landsat8),
            "sentinel1" | "sentinel-1" | "s1" => Ok(Sensor::Sentinel1),
            _ => Err(Error::InvalidConfig(format!("unknown sensor {s:?}"))),
        }
    }
}

/// Identity of a tile: where, when, and which sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleKey {
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    pub sensor: Sensor,
}

impl SampleKey {
    /// Bitwise identity on coordinates, used for uniqueness checks.
    pub fn same_as(&self, other: &Self) -> bool {
        self.lat.to_bits() == other.lat.to_bits()
            && self.lon.to_bits() == other.lon.to_bits()
            && self.date == other.date
            && self.sensor == other.sensor
    }

    /// `lat_lon_date`, the stem used for per-tile output files.
    pub fn stem(&self) -> String {
        format!("{}_{}_{}", self.lat, self.lon, self.date)
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}, {}) {}", self.sensor, self.lat, self.lon, self.date)
    }
}

/// A preprocessed image paired with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: Mask,
    pub key: SampleKey,
}

impl Sample {
    pub fn new(image: Image, label: Mask, key: SampleKey) -> crate::Result<Self> {
        if (image.height(), image.width()) != label.shape() {
            return Err(Error::shape(
                "sample",
                format!("label {}x{}", image.height(), image.width()),
                format!("label {}x{}", label.height(), label.width()),
            ));
        }
        Ok(Self { image, label, key })
    }
}
