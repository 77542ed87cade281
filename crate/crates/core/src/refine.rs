//! Turns per-image probability masks into one binary mask per query.
//!
//! The refined variant rejects optical images whose NDVI cloud mask covers
//! more than the configured fraction, averages whatever survives, thresholds
//! the mean, and cleans the result with a morphological opening. The raw
//! variant only averages and thresholds at 0.5.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::borrow::Borrow;
use core::fmt;

use chrono::NaiveDate;

use crate::morphology::{dilate, erode};
use crate::sample::{SampleKey, Sensor};
use crate::{Error, Mask, RasterTile, Result};

/// Threshold applied by the raw-average variant.
pub const RAW_THRESHOLD: f64 = 0.5;

/// Largest coordinate difference, in degrees, still treated as the same location.
pub const COORD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Pixels with NDVI strictly below this are cloud.
    pub ndvi_threshold: f64,
    /// Optical images with a cloud fraction strictly above this are discarded.
    pub cloud_fraction_limit: f64,
    /// Averaged probability at or above this becomes deforestation.
    pub aggregate_threshold: f64,
    /// Side of the square opening kernel.
    pub kernel: usize,
    /// Average all records together; otherwise average per sensor, then across sensors.
    pub pool_sensors: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            ndvi_threshold: 0.1,
            cloud_fraction_limit: 0.01,
            aggregate_threshold: 0.4,
            kernel: 3,
            pool_sensors: true,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ndvi_threshold", self.ndvi_threshold),
            ("cloud_fraction_limit", self.cloud_fraction_limit),
            ("aggregate_threshold", self.aggregate_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!("kernel must be odd and at least 1, got {}", self.kernel)));
        }
        Ok(())
    }
}

/// A request for the deforestation mask at one location and date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
}

impl Query {
    pub fn same_location(&self, key: &SampleKey) -> bool {
        (self.lat - key.lat).abs() <= COORD_TOLERANCE && (self.lon - key.lon).abs() <= COORD_TOLERANCE
    }

    /// `lat_lon_date`, the stem of the output mask file.
    pub fn stem(&self) -> String {
        format!("{}_{}_{}", self.lat, self.lon, self.date)
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}) {}", self.lat, self.lon, self.date)
    }
}

/// Model output for one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub key: SampleKey,
    pub prob_mask: RasterTile,
    /// Raw red reflectance (Landsat-8 `SR_B4`); optical records only.
    pub red: Option<RasterTile>,
    /// Raw near-infrared reflectance (Landsat-8 `SR_B5`); optical records only.
    pub nir: Option<RasterTile>,
}

/// `(nir - red) / (nir + red)` per pixel, 0 where the sum vanishes.
pub fn ndvi(red: &RasterTile, nir: &RasterTile) -> Result<RasterTile> {
    red.require_same_shape(nir, "ndvi")?;
    let values = red
        .values()
        .iter()
        .zip(nir.values())
        .map(|(&r, &n)| {
            let sum = n + r;
            if sum == 0.0 {
                0.0
            } else {
                ((n - r) / sum).clamp(-1.0, 1.0)
            }
        })
        .collect();
    RasterTile::new(red.height(), red.width(), values)
}

/// Fraction of pixels with NDVI strictly below `threshold`.
pub fn cloud_fraction(ndvi: &RasterTile, threshold: f64) -> f64 {
    let cloudy = ndvi.values().iter().filter(|&&v| v < threshold).count();
    cloudy as f64 / ndvi.values().len() as f64
}

fn record_cloud_fraction(record: &PredictionRecord, config: &RefineConfig) -> Result<f64> {
    let missing = |band| Error::MissingNdviBand { record: format!("{}", record.key), band };
    let red = record.red.as_ref().ok_or_else(|| missing("red"))?;
    let nir = record.nir.as_ref().ok_or_else(|| missing("nir"))?;
    Ok(cloud_fraction(&ndvi(red, nir)?, config.ndvi_threshold))
}

/// Result of cloud screening.
#[derive(Debug, Clone)]
pub struct CloudScreen<'a> {
    pub kept: Vec<(&'a PredictionRecord, f64)>,
    pub discarded: Vec<(&'a PredictionRecord, f64)>,
}

/// Keeps optical records whose cloud fraction is at most the limit.
pub fn filter_cloudy<'a, R: Borrow<PredictionRecord>>(records: &'a [R], config: &RefineConfig) -> Result<CloudScreen<'a>> {
    let mut screen = CloudScreen { kept: Vec::new(), discarded: Vec::new() };
    for record in records {
        let record = record.borrow();
        let fraction = record_cloud_fraction(record, config)?;
        if fraction > config.cloud_fraction_limit {
            log::info!("discarding {}: cloud fraction {fraction:.4} exceeds {}", record.key, config.cloud_fraction_limit);
            screen.discarded.push((record, fraction));
        } else {
            screen.kept.push((record, fraction));
        }
    }
    Ok(screen)
}

/// Per-pixel mean of equally shaped masks.
pub fn mean_mask(masks: &[&RasterTile]) -> Result<RasterTile> {
    let first = masks.first().ok_or(Error::Empty("mask list"))?;
    let mut sum = vec![0.0; first.values().len()];
    for m in masks {
        first.require_same_shape(m, "mask average")?;
        sum.iter_mut().zip(m.values()).for_each(|(s, v)| *s += v);
    }
    let n = masks.len() as f64;
    RasterTile::new(first.height(), first.width(), sum.into_iter().map(|s| s / n).collect())
}

/// Averages the masks and marks pixels whose mean is at least `threshold`.
pub fn aggregate_masks(masks: &[&RasterTile], threshold: f64) -> Result<Mask> {
    let mean = mean_mask(masks)?;
    Mask::threshold(mean.height(), mean.width(), mean.values(), threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Average every available image and threshold at 0.5.
    RawAverage,
    /// Cloud screening, thresholded average, then opening.
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RecordStatus {
    Used,
    /// Optical record whose cloud fraction exceeded the limit.
    Cloudy { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProvenanceEntry {
    pub key: SampleKey,
    pub status: RecordStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMask {
    pub mask: Mask,
    pub provenance: Vec<ProvenanceEntry>,
}

/// Records at the query's location dated on or before the query date.
pub fn select_records<'a, R: Borrow<PredictionRecord>>(query: &Query, records: &'a [R]) -> Vec<&'a PredictionRecord> {
    records
        .iter()
        .map(Borrow::borrow)
        .filter(|r| query.same_location(&r.key) && r.key.date <= query.date)
        .collect()
}

fn average_used(used: &[&PredictionRecord], config: &RefineConfig) -> Result<RasterTile> {
    if config.pool_sensors {
        let masks: Vec<&RasterTile> = used.iter().map(|r| &r.prob_mask).collect();
        return mean_mask(&masks);
    }
    let mut per_sensor = Vec::new();
    for sensor in [Sensor::Landsat8, Sensor::Sentinel1] {
        let masks: Vec<&RasterTile> = used.iter().filter(|r| r.key.sensor == sensor).map(|r| &r.prob_mask).collect();
        if !masks.is_empty() {
            per_sensor.push(mean_mask(&masks)?);
        }
    }
    let refs: Vec<&RasterTile> = per_sensor.iter().collect();
    mean_mask(&refs)
}

/// Produces the final mask for one query from its available records.
///
/// Every record must sit at the query's location. An empty record list, or a
/// refined run where every record is discarded, is a [`Error::NoData`].
pub fn refine_query<R: Borrow<PredictionRecord>>(
    query: &Query,
    records: &[R],
    config: &RefineConfig,
    variant: Variant,
) -> Result<RefinedMask> {
    config.validate()?;
    for r in records {
        let key = &r.borrow().key;
        if !query.same_location(key) {
            return Err(Error::ForeignRecord { record: format!("{key}"), query: format!("{query}") });
        }
    }
    if records.is_empty() {
        return Err(Error::NoData(format!("{query}")));
    }

    let mut provenance = Vec::with_capacity(records.len());
    let mut used: Vec<&PredictionRecord> = Vec::with_capacity(records.len());
    match variant {
        Variant::RawAverage => {
            for r in records {
                used.push(r.borrow());
                provenance.push(ProvenanceEntry { key: r.borrow().key, status: RecordStatus::Used });
            }
        }
        Variant::Refined => {
            for r in records {
                let r = r.borrow();
                if r.key.sensor.is_optical() {
                    let fraction = record_cloud_fraction(r, config)?;
                    if fraction > config.cloud_fraction_limit {
                        log::info!("{query}: discarding {} with cloud fraction {fraction:.4}", r.key);
                        provenance.push(ProvenanceEntry { key: r.key, status: RecordStatus::Cloudy { fraction } });
                        continue;
                    }
                }
                used.push(r);
                provenance.push(ProvenanceEntry { key: r.key, status: RecordStatus::Used });
            }
        }
    }
    if used.is_empty() {
        return Err(Error::NoData(format!("{query}: every record was discarded as cloudy")));
    }

    let mean = average_used(&used, config)?;
    let mask = match variant {
        Variant::RawAverage => Mask::threshold(mean.height(), mean.width(), mean.values(), RAW_THRESHOLD)?,
        Variant::Refined => {
            let binary = Mask::threshold(mean.height(), mean.width(), mean.values(), config.aggregate_threshold)?;
            dilate(&erode(&binary, config.kernel)?, config.kernel)?
        }
    };
    Ok(RefinedMask { mask, provenance })
}
