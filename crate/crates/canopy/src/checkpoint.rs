//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     b"CNPYCKPT"
//! version   u32 (= 1)
//! sensor    u8  (0 = landsat8, 1 = sentinel1)
//! in_ch, depth, base_filters   u32 x 3
//! seed      u64
//! params    u32 count, then per tensor: u32 name length, name,
//!           u32 rank, u64 dims, f64 values
//! buffers   same encoding as params
//! ```

use std::path::Path;

use canopy_core::model::{build_attention_unet, ModelConfig, ModelParams, ParamSpec};
use canopy_core::Sensor;

use crate::error::{CanopyError, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"CNPYCKPT";
pub const VERSION: u32 = 1;

fn sensor_tag(sensor: Sensor) -> u8 {
    match sensor {
        Sensor::Landsat8 => 0,
        Sensor::Sentinel1 => 1,
    }
}

fn write_block(out: &mut Vec<u8>, specs: &[ParamSpec], values: &[f64]) {
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for spec in specs {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &values[spec.range()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a model trained for `sensor`.
pub fn encode(params: &ModelParams, sensor: Sensor) -> Vec<u8> {
    let c = params.config();
    let mut out = Vec::with_capacity(64 + 8 * (params.values().len() + params.buffers().len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(sensor_tag(sensor));
    for v in [c.in_channels, c.depth, c.base_filters] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.seed().to_le_bytes());
    write_block(&mut out, params.specs(), params.values());
    write_block(&mut out, params.buffer_specs(), params.buffers());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("unexpected end of file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self, specs: &[ParamSpec], total: usize) -> std::result::Result<Vec<f64>, String> {
        let count = self.u32()? as usize;
        if count != specs.len() {
            return Err(format!("expected {} tensors, found {count}", specs.len()));
        }
        let mut values = Vec::with_capacity(total);
        for spec in specs {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?).map_err(|_| "tensor name is not UTF-8")?;
            if name != spec.name {
                return Err(format!("expected tensor {}, found {name}", spec.name));
            }
            let rank = self.u32()? as usize;
            let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            if dims != spec.shape {
                return Err(format!("tensor {name} has shape {dims:?}, expected {:?}", spec.shape));
            }
            for chunk in self.take(8 * spec.len())?.chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        Ok(values)
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(ModelParams, Sensor)> {
    let corrupt = |detail: String| CanopyError::CorruptCheckpoint { path: path.to_path_buf(), detail };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(corrupt)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32().map_err(corrupt)?;
    if version != VERSION {
        return Err(CanopyError::CheckpointVersion { path: path.to_path_buf(), found: version, expected: VERSION });
    }
    let sensor = match r.take(1).map_err(corrupt)?[0] {
        0 => Sensor::Landsat8,
        1 => Sensor::Sentinel1,
        t => return Err(corrupt(format!("unknown sensor tag {t}"))),
    };
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.u32().map_err(corrupt)? as usize;
    }
    let seed = r.u64().map_err(corrupt)?;
    let config = ModelConfig { in_channels: dims[0], depth: dims[1], base_filters: dims[2] };
    if config.in_channels != sensor.channels() {
        return Err(corrupt(format!("{} input channels recorded for {sensor}", config.in_channels)));
    }
    let layout = build_attention_unet(config, seed).map_err(|e| corrupt(e.to_string()))?;
    let values = r.block(layout.specs(), layout.values().len()).map_err(corrupt)?;
    let buffers = r.block(layout.buffer_specs(), layout.buffers().len()).map_err(corrupt)?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ModelParams::from_parts(config, seed, values, buffers).map_err(|e| corrupt(e.to_string()))?;
    Ok((params, sensor))
}

pub fn save(path: &Path, params: &ModelParams, sensor: Sensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    std::fs::write(path, encode(params, sensor)).at(path)
}

pub fn load(path: &Path) -> Result<(ModelParams, Sensor)> {
    decode(&std::fs::read(path).at(path)?, path)
}

/// Loads a checkpoint and checks it was trained for `expected`.
pub fn load_for(path: &Path, expected: Sensor) -> Result<ModelParams> {
    let (params, found) = load(path)?;
    if found != expected {
        return Err(CanopyError::SensorMismatch { expected, found });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        build_attention_unet(ModelConfig { in_channels: 3, depth: 1, base_filters: 2 }, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = model();
        m.values_mut()[3] = -0.123456789012345;
        let bytes = encode(&m, Sensor::Sentinel1);
        let (back, sensor) = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(sensor, Sensor::Sentinel1);
        assert_eq!(back, m);
        assert_eq!(back.seed(), 5);
        assert_eq!(encode(&back, sensor), bytes);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&model(), Sensor::Sentinel1);
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes, Path::new("x")).unwrap_err(),
            CanopyError::CheckpointVersion { found: 2, expected: 1, .. }
        ));
    }

    #[test]
    fn truncation_and_garbage_are_corrupt() {
        let bytes = encode(&model(), Sensor::Sentinel1);
        for bad in [&bytes[..bytes.len() - 1], &bytes[..20], b"NOTACKPT".as_slice()] {
            assert!(matches!(decode(bad, Path::new("x")).unwrap_err(), CanopyError::CorruptCheckpoint { .. }));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra, Path::new("x")).unwrap_err(), CanopyError::CorruptCheckpoint { .. }));
    }

    #[test]
    fn sensor_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model(), Sensor::Sentinel1).unwrap();
        assert!(load_for(&path, Sensor::Sentinel1).is_ok());
        assert!(matches!(
            load_for(&path, Sensor::Landsat8).unwrap_err(),
            CanopyError::SensorMismatch { expected: Sensor::Landsat8, found: Sensor::Sentinel1 }
        ));
    }
}
