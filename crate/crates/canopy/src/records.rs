//! Prediction record indexes and query lists.
//!
//! A record index has one line per model output:
//!
//! ```text
//! landsat8 -4.1 -54.85 2019-08-01 prob=records/landsat8_-4.1_-54.85_2019-08-01.tif red=/d/b4.tif nir=/d/b5.tif
//! sentinel1 -4.1 -54.85 2019-08-03 prob=records/sentinel1_-4.1_-54.85_2019-08-03.tif
//! ```
//!
//! A query list has `lat lon date` per line. Both accept `#` comments and
//! resolve relative paths against their own directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use canopy_core::refine::{PredictionRecord, Query};
use canopy_core::{SampleKey, Sensor};
use chrono::NaiveDate;

use crate::error::{CanopyError, IoContext, Result};
use crate::raster_io::read_tile;

/// One index line before its rasters are read.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRef {
    pub key: SampleKey,
    pub prob: PathBuf,
    pub red: Option<PathBuf>,
    pub nir: Option<PathBuf>,
}

impl RecordRef {
    /// Index line with paths written as given.
    pub fn to_line(&self) -> String {
        let k = &self.key;
        let mut line = format!("{} {} {} {} prob={}", k.sensor, k.lat, k.lon, k.date, self.prob.display());
        if let (Some(red), Some(nir)) = (&self.red, &self.nir) {
            let _ = write!(line, " red={} nir={}", red.display(), nir.display());
        }
        line
    }

    pub fn load(&self) -> Result<PredictionRecord> {
        Ok(PredictionRecord {
            key: self.key,
            prob_mask: read_tile(&self.prob)?,
            red: self.red.as_deref().map(read_tile).transpose()?,
            nir: self.nir.as_deref().map(read_tile).transpose()?,
        })
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CanopyError {
    CanopyError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let content = raw.split('#').next().unwrap_or("").trim();
        (!content.is_empty()).then(|| (i + 1, content.split_whitespace().collect()))
    })
}

fn parse_date(path: &Path, line: usize, text: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(text, "%Y-%m-%d").map_err(|e| parse_err(path, line, format!("invalid date {text:?}: {e}")))
}

fn parse_f64(path: &Path, line: usize, text: &str, what: &str) -> Result<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line, format!("invalid {what} {text:?}")))
}

pub fn parse_index(text: &str, origin: &Path, base: &Path) -> Result<Vec<RecordRef>> {
    let mut out = Vec::new();
    for (line, fields) in content_lines(text) {
        if fields.len() < 5 {
            return Err(parse_err(origin, line, "expected `sensor lat lon date prob=path [red=path nir=path]`"));
        }
        let sensor: Sensor = fields[0].parse().map_err(|e: canopy_core::Error| parse_err(origin, line, e.to_string()))?;
        let key = SampleKey {
            lat: parse_f64(origin, line, fields[1], "latitude")?,
            lon: parse_f64(origin, line, fields[2], "longitude")?,
            date: parse_date(origin, line, fields[3])?,
            sensor,
        };
        let (mut prob, mut red, mut nir) = (None, None, None);
        for field in &fields[4..] {
            let slot = match field.split_once('=') {
                Some(("prob", p)) => (&mut prob, p),
                Some(("red", p)) => (&mut red, p),
                Some(("nir", p)) => (&mut nir, p),
                _ => return Err(parse_err(origin, line, format!("unexpected field {field:?}"))),
            };
            if slot.0.replace(base.join(slot.1)).is_some() {
                return Err(parse_err(origin, line, format!("field {field:?} repeated")));
            }
        }
        let prob = prob.ok_or_else(|| parse_err(origin, line, "missing prob=path"))?;
        if red.is_some() != nir.is_some() {
            return Err(parse_err(origin, line, "red and nir must be given together"));
        }
        if sensor.is_optical() && red.is_none() {
            return Err(parse_err(origin, line, format!("{sensor} record needs red= and nir= for cloud screening")));
        }
        out.push(RecordRef { key, prob, red, nir });
    }
    Ok(out)
}

pub fn read_index(path: &Path) -> Result<Vec<RecordRef>> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_index(&text, path, path.parent().unwrap_or(Path::new(".")))
}

pub fn parse_queries(text: &str, origin: &Path) -> Result<Vec<Query>> {
    content_lines(text)
        .map(|(line, fields)| {
            if fields.len() != 3 {
                return Err(parse_err(origin, line, "expected `lat lon date`"));
            }
            Ok(Query {
                lat: parse_f64(origin, line, fields[0], "latitude")?,
                lon: parse_f64(origin, line, fields[1], "longitude")?,
                date: parse_date(origin, line, fields[2])?,
            })
        })
        .collect()
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    parse_queries(&std::fs::read_to_string(path).at(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let text = "# records\nlandsat8 -4.1 -54.85 2019-08-01 prob=r/a.tif red=/d/b4.tif nir=/d/b5.tif\n\
                    sentinel1 -4.1 -54.85 2019-08-03 prob=r/b.tif\n";
        let refs = parse_index(text, Path::new("i.txt"), Path::new("/out")).unwrap();
        assert_eq!(refs.len(), 2);
        assert_eq!(refs[0].prob, Path::new("/out/r/a.tif"));
        assert_eq!(refs[0].red.as_deref(), Some(Path::new("/d/b4.tif")));
        assert_eq!(refs[1].nir, None);
        let again: String = refs.iter().map(|r| r.to_line() + "\n").collect();
        assert_eq!(parse_index(&again, Path::new("i.txt"), Path::new("/")).unwrap(), refs);
    }

    #[test]
    fn index_rejects_incomplete_optical_records() {
        for text in [
            "landsat8 1 2 2020-01-01 prob=a.tif\n",
            "landsat8 1 2 2020-01-01 prob=a.tif red=b.tif\n",
            "sentinel1 1 2 2020-01-01 red=b.tif nir=c.tif\n",
            "sentinel1 1 2 2020-01-01 prob=a.tif prob=b.tif\n",
            "sentinel1 1 2 2020-01-01 prob=a.tif cloud=b.tif\n",
        ] {
            assert!(parse_index(text, Path::new("i"), Path::new("/")).is_err(), "{text}");
        }
    }

    #[test]
    fn queries_parse_with_line_numbers() {
        let q = parse_queries("# lat lon date\n-4.1 -54.85 2019-08-10\n", Path::new("q")).unwrap();
        assert_eq!(q, vec![Query { lat: -4.1, lon: -54.85, date: NaiveDate::from_ymd_opt(2019, 8, 10).unwrap() }]);
        let msg = parse_queries("\n1 2\n", Path::new("q")).unwrap_err().to_string();
        assert!(msg.starts_with("q:2:"), "{msg}");
    }
}
