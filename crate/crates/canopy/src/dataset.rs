//! Dataset manifests: one tile per line, all tiles from one sensor.
//!
//! ```text
//! # sensor lat lon date label BAND=path...
//! sentinel1 -3.95 -54.85 2019-08-01 labels/a.tif VV=s1/a_vv.tif VH=s1/a_vh.tif
//! ```
//!
//! Relative paths resolve against the manifest's directory. A label of `-`
//! marks an unlabeled tile, usable for prediction only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use canopy_core::preprocess::{assemble_image, assemble_sample, BandSet, PreprocessConfig};
use canopy_core::{Image, Mask, Sample, SampleKey, Sensor};
use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CanopyError, IoContext, Result};
use crate::raster_io::{read_mask, read_tile};

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub key: SampleKey,
    pub label: Option<PathBuf>,
    pub bands: BTreeMap<String, PathBuf>,
    /// 1-based line in the source manifest.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub sensor: Sensor,
    pub entries: Vec<ManifestEntry>,
    pub path: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes back to manifest text with absolute paths.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# sensor lat lon date label BAND=path...\n");
        for e in &self.entries {
            let label = e.label.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string());
            let _ = write!(out, "{} {} {} {} {}", e.key.sensor, e.key.lat, e.key.lon, e.key.date, label);
            for (band, path) in &e.bands {
                let _ = write!(out, " {band}={}", path.display());
            }
            out.push('\n');
        }
        out
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CanopyError {
    CanopyError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Reads and validates a manifest, including existence of every referenced file.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text, path, base)?;
    for e in &manifest.entries {
        for file in e.label.iter().chain(e.bands.values()) {
            if !file.is_file() {
                return Err(CanopyError::MissingFile { path: path.to_path_buf(), line: e.line, file: file.clone() });
            }
        }
    }
    Ok(manifest)
}

/// Parses manifest text; `origin` names the source in errors and `base` anchors relative paths.
pub fn parse_manifest(text: &str, origin: &Path, base: &Path) -> Result<Manifest> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut sensor: Option<Sensor> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() < 5 {
            return Err(parse_err(origin, line, "expected `sensor lat lon date label BAND=path...`"));
        }
        let entry_sensor: Sensor = fields[0].parse().map_err(|e: canopy_core::Error| parse_err(origin, line, e.to_string()))?;
        match sensor {
            None => sensor = Some(entry_sensor),
            Some(s) if s != entry_sensor => {
                return Err(parse_err(origin, line, format!("sensor {entry_sensor} differs from {s} used earlier in the manifest")));
            }
            Some(_) => {}
        }
        let lat = parse_coord(fields[1], 90.0, "latitude").map_err(|m| parse_err(origin, line, m))?;
        let lon = parse_coord(fields[2], 180.0, "longitude").map_err(|m| parse_err(origin, line, m))?;
        let date = NaiveDate::parse_from_str(fields[3], "%Y-%m-%d")
            .map_err(|e| parse_err(origin, line, format!("invalid date {:?}: {e}", fields[3])))?;
        let key = SampleKey { lat, lon, date, sensor: entry_sensor };
        let label = (fields[4] != "-").then(|| base.join(fields[4]));
        let mut bands = BTreeMap::new();
        for field in &fields[5..] {
            let (name, file) = field
                .split_once('=')
                .filter(|(n, f)| !n.is_empty() && !f.is_empty())
                .ok_or_else(|| parse_err(origin, line, format!("expected BAND=path, found {field:?}")))?;
            if !entry_sensor.bands().contains(&name) {
                return Err(parse_err(
                    origin,
                    line,
                    format!("band {name} is not a {entry_sensor} band (expected {})", entry_sensor.bands().join(", ")),
                ));
            }
            if bands.insert(name.to_string(), base.join(file)).is_some() {
                return Err(parse_err(origin, line, format!("band {name} listed twice")));
            }
        }
        if let Some(missing) = entry_sensor.bands().iter().find(|b| !bands.contains_key(**b)) {
            return Err(CanopyError::MissingBand {
                path: origin.to_path_buf(),
                line,
                entry: key.to_string(),
                band: missing.to_string(),
            });
        }
        if let Some(first) = entries.iter().find(|e| e.key.same_as(&key)) {
            return Err(CanopyError::DuplicateKey { path: origin.to_path_buf(), line, first: first.line, key: key.to_string() });
        }
        entries.push(ManifestEntry { key, label, bands, line });
    }
    let sensor = sensor.ok_or_else(|| parse_err(origin, 0, "manifest has no entries"))?;
    Ok(Manifest { sensor, entries, path: origin.to_path_buf() })
}

fn parse_coord(text: &str, limit: f64, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = text.parse().map_err(|_| format!("invalid {what} {text:?}"))?;
    if !v.is_finite() || v.abs() > limit {
        return Err(format!("{what} {v} outside [-{limit}, {limit}]"));
    }
    Ok(v)
}

/// Reads every band raster of an entry.
pub fn load_bands(entry: &ManifestEntry) -> Result<BandSet> {
    entry.bands.iter().map(|(name, path)| Ok((name.clone(), read_tile(path)?))).collect()
}

/// Reads bands and label of an entry.
pub fn load_sample(entry: &ManifestEntry) -> Result<(BandSet, Mask)> {
    let label = entry.label.as_ref().ok_or_else(|| CanopyError::Usage(format!("entry {} has no label", entry.key)))?;
    Ok((load_bands(entry)?, read_mask(label)?))
}

/// Loads and preprocesses a labeled entry into a training sample.
pub fn prepare_sample(entry: &ManifestEntry, config: &PreprocessConfig) -> Result<Sample> {
    let (bands, label) = load_sample(entry)?;
    assemble_sample(&bands, label, entry.key, config).map_err(|e| with_entry(entry, e))
}

/// Loads and preprocesses an entry's bands only.
pub fn prepare_image(entry: &ManifestEntry, config: &PreprocessConfig) -> Result<Image> {
    assemble_image(&load_bands(entry)?, entry.key.sensor, config).map_err(|e| with_entry(entry, e))
}

fn with_entry(entry: &ManifestEntry, source: canopy_core::Error) -> CanopyError {
    CanopyError::Usage(format!("entry {} (line {}): {source}", entry.key, entry.line))
}

/// Deterministic train/validation split.
///
/// `round(n * val_fraction)` entries go to validation, at least one and at most
/// `n - 1` when `n >= 2`. Both parts keep manifest order.
pub fn split_dataset(manifest: &Manifest, val_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CanopyError::Usage(format!("validation fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n = manifest.len();
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let part = |want: bool| Manifest {
        sensor: manifest.sensor,
        entries: manifest.entries.iter().zip(&is_val).filter(|(_, &v)| v == want).map(|(e, _)| e.clone()).collect(),
        path: manifest.path.clone(),
    };
    Ok((part(false), part(true)))
}
