//! GPS spoofing attack models: constant bias and exponentially growing
//! (stealthy) offsets applied to true fixes inside a scheduled window.
//!
//! The stealthy growth index counts attacked GPS epochs from the window
//! start, so the first spoofed fix carries the initial magnitude `m`.

use crate::estimator::GpsFix;
use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Paper-default lateral bias, roughly one lane width (m).
pub const DEFAULT_BIAS_M: f64 = 4.0;
/// Stealthy defaults: initial magnitude (m) and per-epoch growth base.
pub const DEFAULT_STEALTHY_M: f64 = 1.0;
pub const DEFAULT_STEALTHY_N: f64 = 1.07;
/// Attack duration is drawn uniformly from this range (s).
pub const DURATION_RANGE_S: (f64, f64) = (5.0, 35.0);

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack window must satisfy start < end, got [{start}, {end}]")]
    BadWindow { start: f64, end: f64 },
    #[error("invalid stealthy parameters: m = {m}, n = {n} (need m > 0, n > 1)")]
    BadStealthyParams { m: f64, n: f64 },
    #[error("direction must be a unit vector, got norm {0}")]
    BadDirection(f64),
    #[error("trip of {trip_duration} s is too short for a {max_duration} s attack")]
    TripTooShort { trip_duration: f64, max_duration: f64 },
}

/// Which attack family a schedule applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// Fixes pass through untouched.
    None,
    /// Fixed world-frame offset `bias` added inside the window.
    ConstantBias { bias: [f64; 2] },
    /// Offset `m * n^j` along `direction`, with `j` counting spoofed epochs
    /// since the window start.
    Stealthy { m: f64, n: f64, direction: [f64; 2] },
}

/// An attack window plus its parameters, world-frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSchedule {
    pub kind: AttackKind,
    /// Window start (s, inclusive).
    pub start: f64,
    /// Window end (s, inclusive).
    pub end: f64,
}

impl AttackSchedule {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            start: 0.0,
            end: 0.0,
        }
    }

    pub fn constant_bias(start: f64, end: f64, bias: [f64; 2]) -> Result<Self, AttackError> {
        let sched = Self {
            kind: AttackKind::ConstantBias { bias },
            start,
            end,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn stealthy(start: f64, end: f64, m: f64, n: f64, direction: [f64; 2]) -> Result<Self, AttackError> {
        let sched = Self {
            kind: AttackKind::Stealthy { m, n, direction },
            start,
            end,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if matches!(self.kind, AttackKind::None) {
            return Ok(());
        }
        if !(self.start < self.end) {
            return Err(AttackError::BadWindow {
                start: self.start,
                end: self.end,
            });
        }
        match self.kind {
            AttackKind::Stealthy { m, n, direction } => {
                if !(m > 0.0) || !(n > 1.0) {
                    return Err(AttackError::BadStealthyParams { m, n });
                }
                let norm = (direction[0] * direction[0] + direction[1] * direction[1]).sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(AttackError::BadDirection(norm));
                }
            }
            AttackKind::ConstantBias { .. } | AttackKind::None => {}
        }
        Ok(())
    }

    pub fn in_window(&self, t: f64) -> bool {
        !matches!(self.kind, AttackKind::None) && t >= self.start && t <= self.end
    }

    /// World-frame offset injected at the `epoch_index`-th spoofed epoch.
    pub fn offset_at(&self, epoch_index: u32) -> Vector2<f64> {
        match self.kind {
            AttackKind::None => Vector2::zeros(),
            AttackKind::ConstantBias { bias } => Vector2::new(bias[0], bias[1]),
            AttackKind::Stealthy { m, n, direction } => {
                let magnitude = m * n.powi(epoch_index as i32);
                Vector2::new(direction[0], direction[1]) * magnitude
            }
        }
    }

    /// Re-express default parameters laterally to the road: the bias and
    /// stealthy direction become the unit perpendicular of `heading`,
    /// resolved once at attack onset and frozen.
    pub fn with_lateral_geometry(mut self, heading_at_onset: f64) -> Self {
        let lateral = [-heading_at_onset.sin(), heading_at_onset.cos()];
        match &mut self.kind {
            AttackKind::ConstantBias { bias } => {
                let magnitude = (bias[0] * bias[0] + bias[1] * bias[1]).sqrt();
                *bias = [lateral[0] * magnitude, lateral[1] * magnitude];
            }
            AttackKind::Stealthy { direction, .. } => *direction = lateral,
            AttackKind::None => {}
        }
        self
    }
}

/// Draw an attack window uniformly: duration in `DURATION_RANGE_S`, start
/// anywhere that fits, parameters at scenario defaults (lane-lateral values
/// expressed on the east axis until [`AttackSchedule::with_lateral_geometry`]
/// orients them).
pub fn random_schedule<R: Rng>(rng: &mut R, kind: AttackMenu, trip_duration: f64) -> Result<AttackSchedule, AttackError> {
    if matches!(kind, AttackMenu::None) {
        return Ok(AttackSchedule::none());
    }
    let (lo, hi) = DURATION_RANGE_S;
    if !(trip_duration > hi + 5.0) {
        return Err(AttackError::TripTooShort {
            trip_duration,
            max_duration: hi + 5.0,
        });
    }
    let duration = rng.gen_range(lo..hi);
    let start = rng.gen_range(0.0..trip_duration - duration);
    let end = start + duration;
    match kind {
        AttackMenu::ConstantBias => AttackSchedule::constant_bias(start, end, [DEFAULT_BIAS_M, 0.0]),
        AttackMenu::Stealthy => AttackSchedule::stealthy(start, end, DEFAULT_STEALTHY_M, DEFAULT_STEALTHY_N, [1.0, 0.0]),
        AttackMenu::None => unreachable!(),
    }
}

/// Attack family selector used by configuration and the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMenu {
    None,
    ConstantBias,
    Stealthy,
}

/// Applies a schedule to a stream of fixes, tracking the spoofed-epoch
/// count that drives stealthy growth.
#[derive(Debug, Clone)]
pub struct AttackRunner {
    schedule: AttackSchedule,
    epochs_spoofed: u32,
}

impl AttackRunner {
    pub fn new(schedule: AttackSchedule) -> Self {
        Self {
            schedule,
            epochs_spoofed: 0,
        }
    }

    pub fn schedule(&self) -> &AttackSchedule {
        &self.schedule
    }

    /// Transform one fix. Outside the window this is the identity map.
    pub fn apply(&mut self, fix: &GpsFix) -> GpsFix {
        if !self.schedule.in_window(fix.t) {
            return *fix;
        }
        let offset = self.schedule.offset_at(self.epochs_spoofed);
        self.epochs_spoofed += 1;
        GpsFix {
            t: fix.t,
            px: fix.px + offset[0],
            py: fix.py + offset[1],
            spoofed: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_bias_adds_offset_inside_window() {
        let sched = AttackSchedule::constant_bias(10.0, 30.0, [4.0, 0.0]).unwrap();
        let mut runner = AttackRunner::new(sched);
        let spoofed = runner.apply(&GpsFix::new(15.0, 100.0, 200.0));
        assert_relative_eq!(spoofed.px, 104.0);
        assert_relative_eq!(spoofed.py, 200.0);
        assert!(spoofed.spoofed);
    }

    #[test]
    fn identity_outside_window() {
        let sched = AttackSchedule::constant_bias(10.0, 30.0, [4.0, 0.0]).unwrap();
        let mut runner = AttackRunner::new(sched);
        for t in [0.0, 9.99, 30.01, 100.0] {
            let fix = GpsFix::new(t, 1.0, 2.0);
            let out = runner.apply(&fix);
            assert_eq!(out, fix);
            assert!(!out.spoofed);
        }
    }

    #[test]
    fn stealthy_first_epoch_magnitude() {
        let sched = AttackSchedule::stealthy(0.0, 60.0, 0.7, 1.1, [0.0, 1.0]).unwrap();
        let mut runner = AttackRunner::new(sched);
        let out = runner.apply(&GpsFix::new(1.0, 0.0, 0.0));
        let offset = ((out.px).powi(2) + (out.py).powi(2)).sqrt();
        assert_relative_eq!(offset, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn stealthy_growth_matches_paper_magnitude() {
        // m = 1.0, n = 1.07: after 20 attacked epochs the offset is ~3.87 m,
        // comparable to the 4 m constant bias.
        let sched = AttackSchedule::stealthy(0.0, 60.0, 1.0, 1.07, [1.0, 0.0]).unwrap();
        let mut runner = AttackRunner::new(sched);
        let mut last = GpsFix::new(0.0, 0.0, 0.0);
        for j in 0..=20 {
            last = runner.apply(&GpsFix::new(j as f64, 0.0, 0.0));
        }
        assert_relative_eq!(last.px, 1.07f64.powi(20), epsilon = 1e-12);
        assert!((last.px - 3.8697).abs() < 5e-4);
    }

    #[test]
    fn stealthy_offsets_strictly_increase() {
        let sched = AttackSchedule::stealthy(0.0, 100.0, 0.5, 1.05, [1.0, 0.0]).unwrap();
        let mut prev = 0.0;
        for j in 0..50 {
            let mag = sched.offset_at(j).norm();
            assert!(mag > prev, "offset at epoch {j} did not grow");
            prev = mag;
        }
        let bias = AttackSchedule::constant_bias(0.0, 100.0, [4.0, 0.0]).unwrap();
        for j in 0..50 {
            assert_relative_eq!(bias.offset_at(j).norm(), 4.0);
        }
    }

    #[test]
    fn spoofed_labels_partition_epochs() {
        let sched = AttackSchedule::constant_bias(5.0, 20.0, [4.0, 0.0]).unwrap();
        let mut runner = AttackRunner::new(sched);
        for k in 0..40 {
            let t = k as f64;
            let out = runner.apply(&GpsFix::new(t, 0.0, 0.0));
            assert_eq!(out.spoofed, (5.0..=20.0).contains(&t), "label mismatch at {t}");
        }
    }

    #[test]
    fn random_schedule_window_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let sched = random_schedule(&mut rng, AttackMenu::ConstantBias, 100.0).unwrap();
            let dur = sched.end - sched.start;
            assert!((5.0..=35.0).contains(&dur), "duration {dur}");
            assert!(sched.start >= 0.0 && sched.end <= 100.0);
        }
    }

    #[test]
    fn random_schedule_rejects_short_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            random_schedule(&mut rng, AttackMenu::Stealthy, 10.0),
            Err(AttackError::TripTooShort { .. })
        ));
    }

    #[test]
    fn random_schedule_is_deterministic() {
        let a = random_schedule(&mut ChaCha8Rng::seed_from_u64(42), AttackMenu::Stealthy, 120.0).unwrap();
        let b = random_schedule(&mut ChaCha8Rng::seed_from_u64(42), AttackMenu::Stealthy, 120.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lateral_geometry_rotates_defaults() {
        use std::f64::consts::FRAC_PI_2;
        let sched = AttackSchedule::constant_bias(0.0, 10.0, [4.0, 0.0])
            .unwrap()
            .with_lateral_geometry(0.0);
        // Heading east: lateral is due north.
        match sched.kind {
            AttackKind::ConstantBias { bias } => {
                assert_relative_eq!(bias[0], 0.0, epsilon = 1e-12);
                assert_relative_eq!(bias[1], 4.0);
            }
            _ => unreachable!(),
        }
        let sched = AttackSchedule::stealthy(0.0, 10.0, 1.0, 1.07, [1.0, 0.0])
            .unwrap()
            .with_lateral_geometry(FRAC_PI_2);
        match sched.kind {
            AttackKind::Stealthy { direction, .. } => {
                assert_relative_eq!(direction[0], -1.0);
                assert_relative_eq!(direction[1], 0.0, epsilon = 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn schedule_serializes_for_audit_records() {
        let sched = AttackSchedule::stealthy(12.0, 40.0, 1.0, 1.07, [0.6, 0.8]).unwrap();
        let json = serde_json::to_string(&sched).unwrap();
        let back: AttackSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(sched, back);
    }
}
