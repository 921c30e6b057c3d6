//! Detection and localization metrics: per-epoch confusion counts with
//! detection latency, F1 from precision/recall, and trip RMSE.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("estimate/truth length mismatch: {estimates} vs {truth}")]
    LengthMismatch { estimates: usize, truth: usize },
    #[error("empty input")]
    Empty,
}

/// Per-epoch verdict/label tallies for one trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Spoofed epochs missed before the first true positive; equals
    /// `spoofed_total` when the attack is never detected, 0 when the very
    /// first spoofed epoch is flagged.
    pub latency: usize,
    pub spoofed_total: usize,
}

/// Tally verdicts against ground-truth labels, epoch order preserved.
pub fn confusion_counts<I>(epochs: I) -> Confusion
where
    I: IntoIterator<Item = (bool, bool)>, // (verdict positive, spoofed)
{
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
        latency: 0,
        spoofed_total: 0,
    };
    let mut first_tp_at = None;
    for (positive, spoofed) in epochs {
        match (positive, spoofed) {
            (true, true) => {
                if first_tp_at.is_none() {
                    first_tp_at = Some(c.spoofed_total);
                }
                c.tp += 1;
            }
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
        if spoofed {
            c.spoofed_total += 1;
        }
    }
    c.latency = first_tp_at.unwrap_or(c.spoofed_total);
    c
}

impl Confusion {
    /// `tp / (tp + fp)`. With no predicted positives the value is 1 on a
    /// clean trip and 0 when spoofed epochs existed; this keeps benign-only
    /// trips from polluting batch means.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.spoofed_total == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// `tp / (tp + fn)`; 1 when no spoofed epochs exist.
    pub fn recall(&self) -> f64 {
        if self.spoofed_total == 0 {
            1.0
        } else {
            self.tp as f64 / self.spoofed_total as f64
        }
    }

    pub fn f1(&self) -> f64 {
        compute_f1(self.precision(), self.recall())
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn compute_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Conventional RMSE: the square root of the mean squared Euclidean
/// distance between aligned estimate/truth sequences.
pub fn compute_rmse(estimates: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64, MetricsError> {
    if estimates.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            estimates: estimates.len(),
            truth: truth.len(),
        });
    }
    if estimates.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sum: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2))
        .sum();
    Ok((sum / estimates.len() as f64).sqrt())
}

/// Per-trip summary for one detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Spoofed epochs missed before first detection.
    pub detection_latency: f64,
    /// Estimate error over the full trip at IMU rate (m).
    pub rmse: f64,
}

impl TripMetrics {
    pub fn from_confusion(c: &Confusion, rmse: f64) -> Self {
        Self {
            f1: c.f1(),
            precision: c.precision(),
            recall: c.recall(),
            detection_latency: c.latency as f64,
            rmse,
        }
    }
}
