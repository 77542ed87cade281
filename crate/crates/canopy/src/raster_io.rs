//! Single-band GeoTIFF-style rasters on disk.
//!
//! Bands and probability masks are stored as 32-bit float grayscale TIFF,
//! binary masks as 8-bit grayscale TIFF holding 0 and 1. Reading accepts any
//! single-channel integer or float sample format.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use canopy_core::{Mask, RasterTile};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use crate::error::{CanopyError, IoContext, Result};

fn tiff_err(path: &Path) -> impl FnOnce(tiff::TiffError) -> CanopyError + '_ {
    move |source| CanopyError::Tiff { path: path.to_path_buf(), source }
}

/// Reads the first image of a single-band TIFF as `f64` values.
pub fn read_tile(path: &Path) -> Result<RasterTile> {
    let file = File::open(path).at(path)?;
    let mut decoder = Decoder::new(BufReader::new(file)).map_err(tiff_err(path))?;
    let color = decoder.colortype().map_err(tiff_err(path))?;
    if !matches!(color, ColorType::Gray(_)) {
        return Err(CanopyError::UnsupportedRaster {
            path: path.to_path_buf(),
            detail: format!("expected a single grayscale band, found {color:?}"),
        });
    }
    let (width, height) = decoder.dimensions().map_err(tiff_err(path))?;
    let values: Vec<f64> = match decoder.read_image().map_err(tiff_err(path))? {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f64).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f64).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
    };
    RasterTile::new(height as usize, width as usize, values)
        .map_err(|source| CanopyError::Raster { path: path.to_path_buf(), source })
}

/// Reads a 0/1 label or mask raster. Any other value is an error naming it.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let tile = read_tile(path)?;
    Mask::from_tile(&tile).map_err(|source| CanopyError::Raster { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    Ok(BufWriter::new(File::create(path).at(path)?))
}

fn dims(path: &Path, height: usize, width: usize) -> Result<(u32, u32)> {
    match (u32::try_from(width), u32::try_from(height)) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(CanopyError::UnsupportedRaster {
            path: path.to_path_buf(),
            detail: format!("{height}x{width} is too large for TIFF"),
        }),
    }
}

/// Writes a tile as 32-bit float TIFF.
pub fn write_tile(path: &Path, tile: &RasterTile) -> Result<()> {
    let (w, h) = dims(path, tile.height(), tile.width())?;
    let data: Vec<f32> = tile.values().iter().map(|&v| v as f32).collect();
    let mut encoder = TiffEncoder::new(create(path)?).map_err(tiff_err(path))?;
    encoder.write_image::<colortype::Gray32Float>(w, h, &data).map_err(tiff_err(path))
}

/// Writes a binary mask as 8-bit TIFF holding 0 and 1.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (w, h) = dims(path, mask.height(), mask.width())?;
    let mut encoder = TiffEncoder::new(create(path)?).map_err(tiff_err(path))?;
    encoder.write_image::<colortype::Gray8>(w, h, mask.data()).map_err(tiff_err(path))
}

/// Writes raw `u16` samples, the storage type of surface reflectance products.
pub fn write_u16(path: &Path, height: usize, width: usize, data: &[u16]) -> Result<()> {
    let (w, h) = dims(path, height, width)?;
    let mut encoder = TiffEncoder::new(create(path)?).map_err(tiff_err(path))?;
    encoder.write_image::<colortype::Gray16>(w, h, data).map_err(tiff_err(path))
}
