//! Sensor-specific band transforms.
//!
//! Landsat-8 bands are min-max normalized per tile and resampled from their
//! native 85x85 grid onto the 256x256 label grid. Sentinel-1 gets a VV/VH
//! ratio band built from raw backscatter, then every band is percentile
//! stretched per tile. All outputs lie in `[0, 1]`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::sample::{Sample, SampleKey, Sensor};
use crate::{Error, Image, Mask, RasterTile, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// Percent clipped from each tail by the Sentinel-1 stretch.
    pub stretch_percent: f64,
    /// Floor applied to VH before dividing.
    pub epsilon_ratio: f64,
    /// Label grid every band is brought onto.
    pub resample_target: (usize, usize),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            stretch_percent: 1.0,
            epsilon_ratio: 1e-6,
            resample_target: (256, 256),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..50.0).contains(&self.stretch_percent) {
            return Err(Error::InvalidConfig(format!(
                "stretch_percent must lie in [0, 50), got {}",
                self.stretch_percent
            )));
        }
        if !(self.epsilon_ratio > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon_ratio must be positive, got {}", self.epsilon_ratio)));
        }
        if self.resample_target.0 == 0 || self.resample_target.1 == 0 {
            return Err(Error::InvalidConfig("resample target must be non-empty".into()));
        }
        Ok(())
    }
}

/// Maps `[min, max]` onto `[0, 1]`. Constant bands become all zeros.
pub fn minmax_normalize(band: &RasterTile) -> RasterTile {
    let (lo, hi) = band.min_max();
    rescale(band, lo, hi)
}

fn rescale(band: &RasterTile, lo: f64, hi: f64) -> RasterTile {
    let span = hi - lo;
    if !(span > 0.0) {
        return band.map(|_| 0.0);
    }
    band.map(|v| (v.clamp(lo, hi) - lo) / span)
}

/// Percentile with linear interpolation between order statistics of `sorted`.
pub fn percentile(sorted: &[f64], percent: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = percent / 100.0 * (n - 1) as f64;
    let below = libm::floor(rank) as usize;
    let above = (below + 1).min(n - 1);
    let frac = rank - below as f64;
    let (a, b) = (sorted[below], sorted[above]);
    (a + (b - a) * frac).clamp(a.min(b), a.max(b))
}

/// Clips to the `[p, 100 - p]` percentile window, then maps the window to `[0, 1]`.
pub fn percentile_stretch(band: &RasterTile, percent: f64) -> Result<RasterTile> {
    if !(0.0..50.0).contains(&percent) {
        return Err(Error::InvalidConfig(format!("stretch percent must lie in [0, 50), got {percent}")));
    }
    let mut sorted = band.values().to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let lo = percentile(&sorted, percent);
    let hi = percentile(&sorted, 100.0 - percent);
    Ok(rescale(band, lo, hi))
}

/// Per-pixel `vv / max(vh, epsilon)`.
pub fn ratio_band(vv: &RasterTile, vh: &RasterTile, epsilon: f64) -> Result<RasterTile> {
    vv.require_same_shape(vh, "ratio band")?;
    let values = vv
        .values()
        .iter()
        .zip(vh.values())
        .map(|(&a, &b)| a / b.max(epsilon))
        .collect();
    RasterTile::new(vv.height(), vv.width(), values)
}

/// Bilinear resampling on a corner-aligned grid: output corners land exactly
/// on input corners.
pub fn resample_bilinear(band: &RasterTile, out_h: usize, out_w: usize) -> Result<RasterTile> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidConfig(format!("resample target must be at least 1x1, got {out_h}x{out_w}")));
    }
    let (in_h, in_w) = band.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(band.clone());
    }
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|y| source_coord(y, in_h, out_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|x| source_coord(x, in_w, out_w)).collect();
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t).clamp(a.min(b), a.max(b));

    let mut values = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = lerp(band.get(y0, x0), band.get(y0, x1), tx);
            let bottom = lerp(band.get(y1, x0), band.get(y1, x1), tx);
            values.push(lerp(top, bottom, ty));
        }
    }
    RasterTile::new(out_h, out_w, values)
}

fn source_coord(i: usize, in_n: usize, out_n: usize) -> (usize, usize, f64) {
    if out_n == 1 || in_n == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
    let lo = (libm::floor(pos) as usize).min(in_n - 1);
    let hi = (lo + 1).min(in_n - 1);
    (lo, hi, pos - lo as f64)
}

/// Raw bands keyed by band name, as loaded from disk.
pub type BandSet = BTreeMap<String, RasterTile>;

fn band<'a>(bands: &'a BandSet, name: &str) -> Result<&'a RasterTile> {
    bands.get(name).ok_or_else(|| Error::MissingBand(name.into()))
}

fn fit_to(tile: RasterTile, (h, w): (usize, usize)) -> Result<RasterTile> {
    if tile.shape() == (h, w) {
        Ok(tile)
    } else {
        resample_bilinear(&tile, h, w)
    }
}

/// Builds a training sample from raw bands and the label.
///
/// Landsat-8 stacks `SR_B1..SR_B7, ST_B10`; Sentinel-1 stacks `VV, VH, VV/VH`.
pub fn assemble_sample(bands: &BandSet, label: Mask, key: SampleKey, config: &PreprocessConfig) -> Result<Sample> {
    let target = config.resample_target;
    if label.shape() != target {
        return Err(Error::shape(
            "label",
            format!("{}x{}", target.0, target.1),
            format!("{}x{}", label.height(), label.width()),
        ));
    }
    Sample::new(assemble_image(bands, key.sensor, config)?, label, key)
}

/// Builds the normalized, resampled channel stack for one sensor without a label.
pub fn assemble_image(bands: &BandSet, sensor: Sensor, config: &PreprocessConfig) -> Result<Image> {
    config.validate()?;
    let target = config.resample_target;
    let stacked: Vec<RasterTile> = match sensor {
        Sensor::Landsat8 => Sensor::Landsat8
            .bands()
            .iter()
            .map(|name| fit_to(minmax_normalize(band(bands, name)?), target))
            .collect::<Result<_>>()?,
        Sensor::Sentinel1 => {
            let vv = band(bands, "VV")?;
            let vh = band(bands, "VH")?;
            let ratio = ratio_band(vv, vh, config.epsilon_ratio)?;
            [vv, vh, &ratio]
                .into_iter()
                .map(|b| fit_to(percentile_stretch(b, config.stretch_percent)?, target))
                .collect::<Result<_>>()?
        }
    };
    Image::from_bands(&stacked)
}

/// Lossless square-grid transforms used for augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Counter-clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::HFlip,
        Transform::VFlip,
    ];

    fn output_shape(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Rot90 | Transform::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source pixel for output pixel `(r, c)` of an `h x w` input.
    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Identity => (r, c),
            Transform::Rot90 => (c, w - 1 - r),
            Transform::Rot180 => (h - 1 - r, w - 1 - c),
            Transform::Rot270 => (h - 1 - c, r),
            Transform::HFlip => (r, w - 1 - c),
            Transform::VFlip => (h - 1 - r, c),
        }
    }

    fn remap<T: Copy>(self, plane: &[T], h: usize, w: usize, out: &mut Vec<T>) {
        let (oh, ow) = self.output_shape(h, w);
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(r, c, h, w);
                out.push(plane[sr * w + sc]);
            }
        }
    }

    /// Applies the transform to image and label alike.
    pub fn apply(self, sample: &Sample) -> Sample {
        let (h, w) = (sample.image.height(), sample.image.width());
        let (oh, ow) = self.output_shape(h, w);
        let mut data = Vec::with_capacity(sample.image.data().len());
        for c in 0..sample.image.channels() {
            self.remap(sample.image.channel(c), h, w, &mut data);
        }
        let mut label = Vec::with_capacity(h * w);
        self.remap(sample.label.data(), h, w, &mut label);
        Sample {
            image: Image::new(sample.image.channels(), oh, ow, data).expect("transform preserves pixel count"),
            label: Mask::from_raw(oh, ow, label),
            key: sample.key,
        }
    }
}

/// Draws one transform uniformly and applies it.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let t = Transform::ALL[rng.gen_range(0..Transform::ALL.len())];
    t.apply(sample)
}
