use std::io;
use std::path::PathBuf;

use canopy_core::Sensor;

pub type Result<T, E = CanopyError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CanopyError {
    #[error(transparent)]
    Core(#[from] canopy_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Tiff { path: PathBuf, source: tiff::TiffError },
    #[error("{}: {detail}", path.display())]
    UnsupportedRaster { path: PathBuf, detail: String },
    #[error("{}: {source}", path.display())]
    Raster { path: PathBuf, source: canopy_core::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: duplicate key {key} (first seen on line {first})", path.display())]
    DuplicateKey { path: PathBuf, line: usize, first: usize, key: String },
    #[error("{}:{line}: entry {entry} is missing band {band}", path.display())]
    MissingBand { path: PathBuf, line: usize, entry: String, band: String },
    #[error("{}:{line}: referenced file {} does not exist", path.display(), file.display())]
    MissingFile { path: PathBuf, line: usize, file: PathBuf },
    #[error("{}: checkpoint version {found} is not supported (expected {expected})", path.display())]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("{}: corrupt checkpoint: {detail}", path.display())]
    CorruptCheckpoint { path: PathBuf, detail: String },
    #[error("checkpoint was trained for {found} but {expected} was requested")]
    SensorMismatch { expected: Sensor, found: Sensor },
    #[error("{0}")]
    Usage(String),
    #[error("no usable records for {count} queries: {queries}")]
    MissingQueries { count: usize, queries: String },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| CanopyError::Io { path: path.into(), source })
    }
}
