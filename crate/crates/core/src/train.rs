//! Mini-batch Adam training and pixel-accuracy validation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::loss::LossConfig;
use crate::metrics::Confusion;
use crate::model::{describe_batch, ModelParams, BN_MOMENTUM};
use crate::preprocess::augment;
use crate::{Error, Result, Sample, Sensor};

/// Probability at or above which a pixel counts as deforested during validation.
pub const VALIDATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Random rotations and flips; only ever applied to Landsat-8 samples.
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with augmentation switched on only for the optical sensor.
    pub fn for_sensor(sensor: Sensor) -> Self {
        Self { augment: sensor == Sensor::Landsat8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(format!(
                "batch_size and epochs must be at least 1, got {} and {}",
                self.batch_size, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1) and epsilon must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Adam with bias-corrected first and second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { learning_rate, beta1, beta2, epsilon, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn from_config(len: usize, config: &TrainConfig) -> Self {
        Self::new(len, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let bias1 = 1.0 - libm::pow(self.beta1, f64::from(self.step));
        let bias2 = 1.0 - libm::pow(self.beta2, f64::from(self.step));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= self.learning_rate * m_hat / (libm::sqrt(v_hat) + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// Starts at 1.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Optimizer steps taken.
    pub updates: usize,
}

impl TrainHistory {
    /// One `epoch train_loss train_acc val_acc` line per epoch.
    pub fn to_lines(&self) -> String {
        let mut out = String::from("# epoch train_loss train_acc val_acc\n");
        for r in &self.records {
            out.push_str(&format!("{} {} {} {}\n", r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy));
        }
        out
    }
}

/// Pixel accuracy of thresholded predictions, pooled over all samples.
pub fn validate(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut confusion = Confusion::default();
    for s in samples {
        let probs = params.forward(&s.image)?;
        confusion += Confusion::from_probabilities(probs.values(), s.label.data(), VALIDATION_THRESHOLD);
    }
    Ok(confusion.pixel_accuracy())
}

/// Runs `config.epochs` passes of shuffled mini-batch Adam.
///
/// Shuffling and augmentation draw from one ChaCha8 stream seeded with
/// `config.seed`, so identical inputs reproduce identical parameters. The last
/// partial batch is kept. Train and validation accuracy are measured after
/// each epoch with running batch-norm statistics and no augmentation.
pub fn train(
    mut params: ModelParams,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::from_config(params.param_count(), config);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    if config.augment && s.key.sensor == Sensor::Landsat8 {
                        augment(s, &mut rng)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let result = params.forward_with_gradients(&batch, &config.loss).map_err(|e| match e {
                Error::NonFiniteLoss { value, .. } => Error::NonFiniteLoss {
                    value,
                    batch: format!("epoch {epoch} batch {batch_index}: {}", describe_batch(&batch)),
                },
                other => other,
            })?;
            adam.step(params.values_mut(), &result.gradients.values);
            params.update_running_stats(&result.stats, BN_MOMENTUM);
            loss_sum += result.loss * batch.len() as f64;
            history.updates += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: validate(&params, train_set)?,
            val_accuracy: validate(&params, val_set)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train acc {:.4} val acc {:.4}",
            record.train_loss,
            record.train_accuracy,
            record.val_accuracy
        );
        history.records.push(record);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Confusion;
    use crate::model::{build_attention_unet, ModelConfig};
    use crate::{Image, Mask, SampleKey};
    use chrono::NaiveDate;

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        let mut params = vec![0.3, -1.2, 4.0];
        let before = params.clone();
        let mut adam = Adam::new(3, 1e-4, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &[0.0; 3]);
        assert_eq!(params, before);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let mut params = vec![1.0, 1.0];
        let mut adam = Adam::new(2, 1e-3, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &[0.5, -2.0]);
        assert!((params[0] - (1.0 - 1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((params[1] - (1.0 + 1e-3 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn hand_thresholded_accuracy() {
        let label = Mask::from_rows(&[[1, 0], [0, 0]]).unwrap();
        let c = Confusion::from_probabilities(&[0.6, 0.4, 0.4, 0.6], label.data(), VALIDATION_THRESHOLD);
        assert_eq!(c.pixel_accuracy(), 0.75);
        let empty = Confusion::from_probabilities(&[0.1; 4], Mask::zeros(2, 2).data(), VALIDATION_THRESHOLD);
        assert_eq!(empty.pixel_accuracy(), 1.0);
    }

    fn tiny_set(n: usize, sensor: Sensor) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let data = (0..3 * 64).map(|p| ((p * (i + 5)) % 17) as f64 / 17.0).collect();
                let label = (0..64).map(|p| u8::from((p + i) % 5 == 0)).collect();
                let key = SampleKey {
                    lat: -4.0 - i as f64 * 0.01,
                    lon: -54.85,
                    date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                    sensor,
                };
                Sample::new(Image::new(3, 8, 8, data).unwrap(), Mask::new(8, 8, label).unwrap(), key).unwrap()
            })
            .collect()
    }

    fn tiny_model() -> ModelParams {
        build_attention_unet(ModelConfig { in_channels: 3, depth: 1, base_filters: 2 }, 11).unwrap()
    }

    #[test]
    fn validation_labels_equal_predictions() {
        let model = tiny_model();
        let mut samples = tiny_set(2, Sensor::Sentinel1);
        for s in &mut samples {
            let probs = model.forward(&s.image).unwrap();
            s.label = Mask::threshold(8, 8, probs.values(), VALIDATION_THRESHOLD).unwrap();
        }
        assert_eq!(validate(&model, &samples).unwrap(), 1.0);
        assert!(validate(&model, &[]).is_err());
    }

    #[test]
    fn batching_arithmetic() {
        let set = tiny_set(32, Sensor::Sentinel1);
        let config = TrainConfig { epochs: 1, ..TrainConfig::for_sensor(Sensor::Sentinel1) };
        let (_, history) = train(tiny_model(), &set, &set[..2], &config).unwrap();
        assert_eq!(history.updates, 2);
        assert_eq!(history.records.len(), 1);
    }

    #[test]
    fn partial_batch_is_kept() {
        let set = tiny_set(5, Sensor::Sentinel1);
        let config = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::for_sensor(Sensor::Sentinel1) };
        let (_, history) = train(tiny_model(), &set, &set, &config).unwrap();
        assert_eq!(history.updates, 6);
    }

    #[test]
    fn identical_seeds_identical_results() {
        let set = tiny_set(6, Sensor::Landsat8);
        let config = TrainConfig { epochs: 3, batch_size: 4, seed: 99, ..TrainConfig::for_sensor(Sensor::Landsat8) };
        let a = train(tiny_model(), &set, &set[..2], &config).unwrap();
        let b = train(tiny_model(), &set, &set[..2], &config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.1.records.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn sentinel_stream_ignores_augment_flag() {
        let set = tiny_set(6, Sensor::Sentinel1);
        let on = TrainConfig { epochs: 2, batch_size: 4, augment: true, ..TrainConfig::default() };
        let off = TrainConfig { augment: false, ..on };
        assert_eq!(train(tiny_model(), &set, &set, &on).unwrap(), train(tiny_model(), &set, &set, &off).unwrap());
    }

    #[test]
    fn landsat_stream_uses_augmentation() {
        let set = tiny_set(6, Sensor::Landsat8);
        let on = TrainConfig { epochs: 2, batch_size: 4, augment: true, ..TrainConfig::default() };
        let off = TrainConfig { augment: false, ..on };
        assert_ne!(train(tiny_model(), &set, &set, &on).unwrap().0, train(tiny_model(), &set, &set, &off).unwrap().0);
    }

    #[test]
    fn rejects_bad_config_and_empty_sets() {
        let set = tiny_set(2, Sensor::Sentinel1);
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(train(tiny_model(), &set, &set, &bad).is_err());
        assert!(train(tiny_model(), &[], &set, &TrainConfig::default()).is_err());
    }
}
