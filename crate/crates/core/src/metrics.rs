//! Pixel accuracy, F1 and IoU from binary confusion counts.

use alloc::format;
use alloc::string::String;
use core::ops::{Add, AddAssign};

use crate::{Error, Mask, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts from two equally long binary slices.
    pub fn from_pairs(pred: &[u8], target: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(target) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    /// Counts after binarizing probabilities with `p >= threshold`.
    pub fn from_probabilities(probs: &[f64], target: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in probs.iter().zip(target) {
            match (p >= threshold, t == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 1.0;
        }
        (self.tp + self.tn) as f64 / n as f64
    }

    /// `2tp / (2tp + fp + fn)`, or 1 when there are no positives anywhere.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `tp / (tp + fp + fn)`, or 1 when there are no positives anywhere.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport { pixel_accuracy: self.pixel_accuracy(), f1: self.f1(), iou: self.iou(), confusion: *self }
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Self) -> Self {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub f1: f64,
    pub iou: f64,
    pub confusion: Confusion,
}

impl MetricsReport {
    /// Flat `name=value` lines, metrics with four fractional digits.
    pub fn to_record(&self) -> String {
        let c = &self.confusion;
        format!(
            "pixel_accuracy={:.4}\nf1={:.4}\niou={:.4}\ntp={}\nfp={}\nfn={}\ntn={}\n",
            self.pixel_accuracy, self.f1, self.iou, c.tp, c.fp, c.fn_, c.tn
        )
    }

    /// Parses the output of [`to_record`](Self::to_record).
    pub fn from_record(text: &str) -> Result<Self> {
        let mut report = MetricsReport { pixel_accuracy: f64::NAN, f1: f64::NAN, iou: f64::NAN, confusion: Confusion::default() };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("metrics line without '=': {line:?}")))?;
            let real = || value.parse::<f64>().map_err(|_| Error::InvalidConfig(format!("bad value for {key}: {value:?}")));
            let count = || value.parse::<u64>().map_err(|_| Error::InvalidConfig(format!("bad count for {key}: {value:?}")));
            match key {
                "pixel_accuracy" => report.pixel_accuracy = real()?,
                "f1" => report.f1 = real()?,
                "iou" => report.iou = real()?,
                "tp" => report.confusion.tp = count()?,
                "fp" => report.confusion.fp = count()?,
                "fn" => report.confusion.fn_ = count()?,
                "tn" => report.confusion.tn = count()?,
                other => return Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
            }
        }
        if [report.pixel_accuracy, report.f1, report.iou].iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidConfig("metrics record lacks pixel_accuracy, f1 or iou".into()));
        }
        Ok(report)
    }
}

/// Confusion-based metrics for one predicted mask against the truth.
pub fn evaluate(pred: &Mask, target: &Mask) -> Result<MetricsReport> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "evaluate",
            format!("{}x{}", target.height(), target.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    Ok(Confusion::from_pairs(pred.data(), target.data()).report())
}

/// Averaging mode over a set of queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Pool confusion counts over all pixels of all queries.
    #[default]
    Micro,
    /// Mean of per-query metrics.
    Macro,
}

/// Aggregates per-query reports. The pooled confusion is reported in both modes.
pub fn aggregate(reports: &[MetricsReport], averaging: Averaging) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Empty("metrics reports"));
    }
    let pooled = reports.iter().fold(Confusion::default(), |acc, r| acc + r.confusion);
    Ok(match averaging {
        Averaging::Micro => pooled.report(),
        Averaging::Macro => {
            let n = reports.len() as f64;
            MetricsReport {
                pixel_accuracy: reports.iter().map(|r| r.pixel_accuracy).sum::<f64>() / n,
                f1: reports.iter().map(|r| r.f1).sum::<f64>() / n,
                iou: reports.iter().map(|r| r.iou).sum::<f64>() / n,
                confusion: pooled,
            }
        }
    })
}
