//! Synthetic blob tiles for smoke tests and overfitting checks.

use alloc::vec;
use alloc::vec::Vec;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Image, Mask, Result, Sample, SampleKey, Sensor};

/// `count` square tiles of side `size` with 1 to 3 bright discs on a darker,
/// noisy background; the label marks the discs.
///
/// Tiles carry `sensor.channels()` channels and keys one hundredth of a degree
/// apart in latitude.
pub fn blob_samples(count: usize, size: usize, sensor: Sensor, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let channels = sensor.channels();
    let date = NaiveDate::from_ymd_opt(2020, 8, 1).expect("valid date");
    (0..count)
        .map(|i| {
            let blobs: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    (
                        rng.gen_range(s / 8.0..s * 7.0 / 8.0),
                        rng.gen_range(s / 8.0..s * 7.0 / 8.0),
                        rng.gen_range(s * 3.0 / 32.0..s * 7.0 / 32.0),
                    )
                })
                .collect();
            let mut label = vec![0u8; size * size];
            for (p, l) in label.iter_mut().enumerate() {
                let (y, x) = ((p / size) as f64, (p % size) as f64);
                *l = u8::from(blobs.iter().any(|&(cy, cx, r)| (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r));
            }
            let mut data = Vec::with_capacity(channels * size * size);
            for c in 0..channels {
                let c = (c % 3) as f64;
                for &l in &label {
                    let base = if l == 1 { 0.75 - 0.1 * c } else { 0.25 + 0.05 * c };
                    data.push(base + rng.gen_range(-0.1..0.1));
                }
            }
            let key = SampleKey { lat: -4.0 - 0.01 * i as f64, lon: -54.85, date, sensor };
            Sample::new(Image::new(channels, size, size, data)?, Mask::new(size, size, label)?, key)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_have_blobs_and_background() {
        let samples = blob_samples(8, 16, Sensor::Sentinel1, 1).unwrap();
        assert_eq!(samples.len(), 8);
        for s in &samples {
            let ones = s.label.count_ones();
            assert!(ones > 0 && ones < 256, "{ones}");
            assert_eq!(s.image.channels(), 3);
        }
        assert_eq!(samples, blob_samples(8, 16, Sensor::Sentinel1, 1).unwrap());
        assert_eq!(blob_samples(1, 16, Sensor::Landsat8, 1).unwrap()[0].image.channels(), 8);
    }
}
