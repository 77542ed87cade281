//! Training objective: equal-weight binary cross-entropy plus soft Dice.

use alloc::format;
use alloc::vec::Vec;

use crate::model::PixelLoss;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub dice_weight: f64,
    /// Added to numerator and denominator of the Dice ratio.
    pub dice_smooth: f64,
    /// Probabilities are clipped to `[eps, 1 - eps]` before taking logs.
    pub prob_clip_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { bce_weight: 0.5, dice_weight: 0.5, dice_smooth: 1.0, prob_clip_epsilon: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bce_weight >= 0.0 && self.dice_weight >= 0.0 && self.bce_weight + self.dice_weight > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative with a positive sum, got {} and {}",
                self.bce_weight, self.dice_weight
            )));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::InvalidConfig(format!("dice_smooth must be positive, got {}", self.dice_smooth)));
        }
        if !(self.prob_clip_epsilon > 0.0 && self.prob_clip_epsilon < 0.5) {
            return Err(Error::InvalidConfig(format!("prob_clip_epsilon must lie in (0, 0.5), got {}", self.prob_clip_epsilon)));
        }
        Ok(())
    }
}

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape("loss inputs", format!("{} pixels", pred.len()), format!("{} pixels", target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("loss inputs"));
    }
    Ok(())
}

/// Mean binary cross-entropy over pixels.
pub fn bce_loss(pred: &[f64], target: &[f64], epsilon: f64) -> Result<f64> {
    check(pred, target)?;
    Ok(bce_with_grad(pred, target, epsilon, false).0)
}

/// Soft Dice loss `1 - (2 sum(p t) + s) / (sum p + sum t + s)`.
pub fn dice_loss(pred: &[f64], target: &[f64], smooth: f64) -> Result<f64> {
    check(pred, target)?;
    Ok(dice_with_grad(pred, target, smooth, false).0)
}

/// `bce_weight * bce + dice_weight * dice`.
pub fn combined_loss(pred: &[f64], target: &[f64], config: &LossConfig) -> Result<f64> {
    check(pred, target)?;
    config.validate()?;
    Ok(config.evaluate(pred, target).0)
}

fn bce_with_grad(pred: &[f64], target: &[f64], eps: f64, want_grad: bool) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { Vec::with_capacity(pred.len()) } else { Vec::new() };
    for (&p, &t) in pred.iter().zip(target) {
        let clipped = p.clamp(eps, 1.0 - eps);
        total -= t * libm::log(clipped) + (1.0 - t) * libm::log(1.0 - clipped);
        if want_grad {
            // The clip has zero slope outside the open window.
            let g = if p > eps && p < 1.0 - eps { (-t / clipped + (1.0 - t) / (1.0 - clipped)) / n } else { 0.0 };
            grad.push(g);
        }
    }
    (total / n, grad)
}

fn dice_with_grad(pred: &[f64], target: &[f64], smooth: f64, want_grad: bool) -> (f64, Vec<f64>) {
    let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = 2.0 * inter + smooth;
    let den = sum_p + sum_t + smooth;
    let grad = if want_grad {
        target.iter().map(|&t| -(2.0 * t * den - num) / (den * den)).collect()
    } else {
        Vec::new()
    };
    (1.0 - num / den, grad)
}

impl PixelLoss for LossConfig {
    fn evaluate(&self, probs: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
        let (bce, gb) = bce_with_grad(probs, targets, self.prob_clip_epsilon, true);
        let (dice, gd) = dice_with_grad(probs, targets, self.dice_smooth, true);
        let grad = gb.iter().zip(&gd).map(|(b, d)| self.bce_weight * b + self.dice_weight * d).collect();
        (self.bce_weight * bce + self.dice_weight * dice, grad)
    }
}
