//! On-disk fixtures: Sentinel-1 and Landsat-8 tiles over a few locations.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use canopy::raster_io::{write_mask, write_tile, write_u16};
use canopy_core::{Mask, RasterTile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LON: f64 = -54.85;
pub const L8_DATE: &str = "2019-08-01";
pub const S1_DATE: &str = "2019-08-03";
pub const QUERY_DATE: &str = "2019-08-10";

pub struct Fixture {
    pub root: PathBuf,
    pub s1_manifest: PathBuf,
    pub l8_manifest: PathBuf,
    pub queries: PathBuf,
    pub truth: PathBuf,
    pub label_size: usize,
}

pub fn lat(i: usize) -> f64 {
    -4.0 - 0.01 * i as f64
}

/// Disc centre and radius as fractions of the tile side.
fn disc(i: usize) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
    (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.12..0.25))
}

fn inside(d: (f64, f64, f64), r: usize, c: usize, size: usize) -> bool {
    let (y, x) = ((r as f64 + 0.5) / size as f64, (c as f64 + 0.5) / size as f64);
    (y - d.0).powi(2) + (x - d.1).powi(2) <= d.2 * d.2
}

pub fn truth_mask(i: usize, size: usize) -> Mask {
    let d = disc(i);
    let data = (0..size * size).map(|p| u8::from(inside(d, p / size, p % size, size))).collect();
    Mask::new(size, size, data).unwrap()
}

/// `count` locations, each with one Sentinel-1 tile of `s1_size`, one Landsat-8
/// tile of `l8_size`, a label of `label_size` and a ground-truth mask for the
/// query dated after both. Location 0's Landsat-8 tile is 5% cloud.
pub fn build(root: &Path, count: usize, s1_size: usize, l8_size: usize, label_size: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s1 = String::from("# sensor lat lon date label bands\n");
    let mut l8 = String::from("# sensor lat lon date label bands\n");
    let mut queries = String::from("# lat lon date\n");
    for i in 0..count {
        let d = disc(i);
        let stem = format!("{}_{}", lat(i), LON);
        let label = truth_mask(i, label_size);
        write_mask(&root.join(format!("labels/{stem}.tif")), &label).unwrap();
        write_mask(&root.join(format!("truth/{}_{}_{QUERY_DATE}.tif", lat(i), LON)), &label).unwrap();

        for (band, fg, bg) in [("VV", -8.0, -14.0), ("VH", -15.0, -21.0)] {
            let values = (0..s1_size * s1_size)
                .map(|p| if inside(d, p / s1_size, p % s1_size, s1_size) { fg } else { bg } + rng.gen_range(-1.0..1.0))
                .collect();
            write_tile(&root.join(format!("s1/{stem}_{band}.tif")), &RasterTile::new(s1_size, s1_size, values).unwrap())
                .unwrap();
        }
        let _ = writeln!(
            s1,
            "sentinel1 {} {LON} {S1_DATE} labels/{stem}.tif VV=s1/{stem}_VV.tif VH=s1/{stem}_VH.tif",
            lat(i)
        );

        let _ = write!(l8, "landsat8 {} {LON} {L8_DATE} labels/{stem}.tif", lat(i));
        for (b, band) in canopy_core::Sensor::Landsat8.bands().iter().enumerate() {
            let data: Vec<u16> = (0..l8_size * l8_size)
                .map(|p| {
                    let cleared = inside(d, p / l8_size, p % l8_size, l8_size);
                    let cloud = i == 0 && p % 20 == 0;
                    let base: u16 = match (*band, cleared, cloud) {
                        (_, _, true) => 20000,
                        ("SR_B4", true, _) => 12000,
                        ("SR_B4", false, _) => 8000,
                        ("SR_B5", true, _) => 16000,
                        ("SR_B5", false, _) => 24000,
                        (_, true, _) => 14000 + 300 * b as u16,
                        (_, false, _) => 9000 + 200 * b as u16,
                    };
                    base + rng.gen_range(0..400)
                })
                .collect();
            let rel = format!("l8/{stem}_{band}.tif");
            write_u16(&root.join(&rel), l8_size, l8_size, &data).unwrap();
            let _ = write!(l8, " {band}={rel}");
        }
        l8.push('\n');
        let _ = writeln!(queries, "{} {LON} {QUERY_DATE}", lat(i));
    }
    let fixture = Fixture {
        root: root.to_path_buf(),
        s1_manifest: root.join("s1_manifest.txt"),
        l8_manifest: root.join("l8_manifest.txt"),
        queries: root.join("queries.txt"),
        truth: root.join("truth"),
        label_size,
    };
    std::fs::write(&fixture.s1_manifest, s1).unwrap();
    std::fs::write(&fixture.l8_manifest, l8).unwrap();
    std::fs::write(&fixture.queries, queries).unwrap();
    fixture
}

/// Runs the CLI in-process and returns its exit code.
pub fn canopy(args: &[&str]) -> i32 {
    canopy::cli::run(std::iter::once("canopy").chain(args.iter().copied()))
}

pub fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                out.push((path.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}
