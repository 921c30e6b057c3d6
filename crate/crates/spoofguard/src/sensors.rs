//! Trajectory ingestion and sensor synthesis: noisy IMU streams at the base
//! rate and GPS fixes at 1 Hz, both derived from a ground-truth trajectory.
//!
//! IMU samples are produced by differencing the ground truth rather than by
//! simulating accelerometer physics; the attack/defense problem does not
//! depend on inertial error models beyond additive white noise.

use crate::estimator::{wrap_angle, GpsFix, ImuSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

/// Expected trajectory CSV header.
pub const TRAJECTORY_HEADER: [&str; 5] = ["t", "x", "y", "heading", "speed"];

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("trajectory header must be `t,x,y,heading,speed`, got `{0}`")]
    BadHeader(String),
    #[error("malformed trajectory row at line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("non-monotonic timestamps at line {line}: {prev} -> {next}")]
    NonMonotonicTime { line: usize, prev: f64, next: f64 },
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("invalid sample rate dt = {0}")]
    BadRate(f64),
}

/// One ground-truth sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

/// Ground-truth trajectory at a uniform base rate equal to the IMU step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Vec<TrajectoryPoint>,
    dt: f64,
}

impl Trajectory {
    /// Build from uniformly spaced points; validates the invariants.
    pub fn new(points: Vec<TrajectoryPoint>, dt: f64) -> Result<Self, SensorError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SensorError::BadRate(dt));
        }
        if points.len() < 2 {
            return Err(SensorError::TooShort(points.len()));
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[1].t <= w[0].t {
                return Err(SensorError::NonMonotonicTime {
                    line: i + 2,
                    prev: w[0].t,
                    next: w[1].t,
                });
            }
            if ((w[1].t - w[0].t) - dt).abs() > 1e-6 {
                return Err(SensorError::BadRow {
                    line: i + 2,
                    reason: format!("non-uniform spacing {} (expected dt = {dt})", w[1].t - w[0].t),
                });
            }
        }
        for (i, p) in points.iter().enumerate() {
            if ![p.t, p.x, p.y, p.heading, p.speed].iter().all(|v| v.is_finite()) {
                return Err(SensorError::BadRow {
                    line: i + 2,
                    reason: "non-finite value".into(),
                });
            }
        }
        Ok(Self { points, dt })
    }

    /// Load a `t,x,y,heading,speed` CSV, resampling onto a uniform `dt` grid
    /// by linear interpolation (shortest-arc for heading) when the input
    /// spacing differs.
    pub fn from_csv(path: &Path, dt: f64) -> Result<Self, SensorError> {
        let mut raw = String::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut raw))
            .map_err(|source| SensorError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_csv_str(&raw, dt)
    }

    pub fn from_csv_str(content: &str, dt: f64) -> Result<Self, SensorError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(content.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| SensorError::BadHeader(e.to_string()))?
            .clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != TRAJECTORY_HEADER {
            return Err(SensorError::BadHeader(got.join(",")));
        }
        let mut rows: Vec<TrajectoryPoint> = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let line = idx + 2; // header is line 1
            let record = record.map_err(|e| SensorError::BadRow {
                line,
                reason: e.to_string(),
            })?;
            if record.len() != 5 {
                return Err(SensorError::BadRow {
                    line,
                    reason: format!("expected 5 fields, got {}", record.len()),
                });
            }
            let mut vals = [0.0f64; 5];
            for (i, field) in record.iter().enumerate() {
                vals[i] = field.parse().map_err(|_| SensorError::BadRow {
                    line,
                    reason: format!("`{field}` is not a number"),
                })?;
                if !vals[i].is_finite() {
                    return Err(SensorError::BadRow {
                        line,
                        reason: format!("non-finite value `{field}`"),
                    });
                }
            }
            if let Some(prev) = rows.last() {
                if vals[0] <= prev.t {
                    return Err(SensorError::NonMonotonicTime {
                        line,
                        prev: prev.t,
                        next: vals[0],
                    });
                }
            }
            rows.push(TrajectoryPoint {
                t: vals[0],
                x: vals[1],
                y: vals[2],
                heading: vals[3],
                speed: vals[4],
            });
        }
        if rows.len() < 2 {
            return Err(SensorError::TooShort(rows.len()));
        }
        Ok(Self::resample(&rows, dt))
    }

    /// Linear resampling of (possibly non-uniform) rows onto a `dt` grid that
    /// starts at the first timestamp.
    fn resample(rows: &[TrajectoryPoint], dt: f64) -> Self {
        let t0 = rows[0].t;
        let t_end = rows[rows.len() - 1].t;
        let steps = ((t_end - t0) / dt + TIME_EPS).floor() as usize;
        let mut points = Vec::with_capacity(steps + 1);
        let mut cursor = 0usize;
        for k in 0..=steps {
            let t = t0 + k as f64 * dt;
            while cursor + 1 < rows.len() - 1 && rows[cursor + 1].t < t - TIME_EPS {
                cursor += 1;
            }
            let a = &rows[cursor];
            let b = &rows[cursor + 1];
            let frac = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
            points.push(TrajectoryPoint {
                t,
                x: a.x + (b.x - a.x) * frac,
                y: a.y + (b.y - a.y) * frac,
                heading: wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * frac),
                speed: a.speed + (b.speed - a.speed) * frac,
            });
        }
        Self { points, dt }
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.points[0].t
    }

    /// Trip duration in seconds.
    pub fn duration(&self) -> f64 {
        self.points[self.points.len() - 1].t - self.points[0].t
    }

    /// Interpolated heading at time `t`, clamped to the trajectory span.
    pub fn heading_at(&self, t: f64) -> f64 {
        let t0 = self.start_time();
        let idx = (((t - t0) / self.dt).floor().max(0.0) as usize).min(self.points.len() - 2);
        let a = &self.points[idx];
        let b = &self.points[idx + 1];
        let frac = ((t - a.t) / self.dt).clamp(0.0, 1.0);
        wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * frac)
    }

    /// Cumulative polyline arc length at each point.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut acc = Vec::with_capacity(self.points.len());
        let mut total = 0.0;
        acc.push(0.0);
        for w in self.points.windows(2) {
            total += ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
            acc.push(total);
        }
        acc
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SensorError> {
        let mut wtr = csv::Writer::from_path(path).map_err(|e| SensorError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
        wtr.write_record(TRAJECTORY_HEADER).ok();
        for p in &self.points {
            wtr.write_record(&[
                format!("{}", p.t),
                format!("{}", p.x),
                format!("{}", p.y),
                format!("{}", p.heading),
                format!("{}", p.speed),
            ])
            .ok();
        }
        wtr.flush().map_err(|source| SensorError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Noise magnitudes and the per-scenario RNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoiseConfig {
    /// Per-axis GPS position noise (m).
    pub gps_sigma: f64,
    /// IMU acceleration noise (m/s^2).
    pub imu_accel_sigma: f64,
    /// IMU gyro noise (rad/s).
    pub imu_gyro_sigma: f64,
    /// 64-bit seed; sensors draw from independent substreams of it.
    pub seed: u64,
}

impl Default for SensorNoiseConfig {
    fn default() -> Self {
        Self {
            gps_sigma: 1.5,
            imu_accel_sigma: 0.005,
            imu_gyro_sigma: 5e-4,
            seed: 0,
        }
    }
}

/// RNG substream labels, one per consumer of the scenario seed.
#[derive(Debug, Clone, Copy)]
pub enum Substream {
    Imu = 1,
    Gps = 2,
    RsuRange = 3,
    Schedule = 4,
}

/// A seeded generator on an independent substream: same key, distinct
/// stream index, so sensors never share draws.
pub fn substream_rng(seed: u64, stream: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Difference the ground truth into one IMU sample per trajectory step.
/// Sample `k` covers `[t_k, t_{k+1}]` and is stamped with `t_{k+1}`.
pub fn synthesize_imu(traj: &Trajectory, cfg: &SensorNoiseConfig) -> Vec<ImuSample> {
    let mut rng = substream_rng(cfg.seed, Substream::Imu);
    let accel_noise = Normal::new(0.0, cfg.imu_accel_sigma.max(0.0)).expect("sigma >= 0");
    let gyro_noise = Normal::new(0.0, cfg.imu_gyro_sigma.max(0.0)).expect("sigma >= 0");
    let dt = traj.dt();
    traj.points()
        .windows(2)
        .map(|w| ImuSample {
            t: w[1].t,
            accel: (w[1].speed - w[0].speed) / dt + accel_noise.sample(&mut rng),
            yaw_rate: wrap_angle(w[1].heading - w[0].heading) / dt + gyro_noise.sample(&mut rng),
        })
        .collect()
}

/// Emit one GPS fix per whole second of trajectory time, starting one
/// second in. Each fix lands exactly on an IMU timestamp.
pub fn synthesize_gps(traj: &Trajectory, cfg: &SensorNoiseConfig) -> Vec<GpsFix> {
    let mut rng = substream_rng(cfg.seed, Substream::Gps);
    let noise = Normal::new(0.0, cfg.gps_sigma.max(0.0)).expect("sigma >= 0");
    let per_fix = (1.0 / traj.dt()).round() as usize;
    let mut fixes = Vec::new();
    if per_fix == 0 {
        return fixes;
    }
    let mut idx = per_fix;
    while idx < traj.len() {
        let p = &traj.points()[idx];
        fixes.push(GpsFix {
            t: p.t,
            px: p.x + noise.sample(&mut rng),
            py: p.y + noise.sample(&mut rng),
            spoofed: false,
        });
        idx += per_fix;
    }
    fixes
}

/// Segment specification for the synthetic trajectory generator.
#[derive(Debug, Clone, Copy)]
enum Maneuver {
    Straight,
    Curve { yaw_rate: f64 },
}

/// Generate a mixed straight/curved trajectory by integrating the unicycle
/// model, so that noiseless sensors replayed through the filter reproduce it
/// exactly.
pub fn synthetic_trajectory(seed: u64, duration_s: f64, dt: f64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthetic_trajectory_with_rng(&mut rng, duration_s, dt)
}

pub fn synthetic_trajectory_with_rng(rng: &mut ChaCha8Rng, duration_s: f64, dt: f64) -> Trajectory {
    let steps = (duration_s / dt).round() as usize;
    let mut points = Vec::with_capacity(steps + 1);
    let mut x = 0.0f64;
    let mut y = 0.0f64;
    let mut heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut speed = rng.gen_range(8.0..15.0);
    let mut maneuver = Maneuver::Straight;
    let mut remaining = 0usize;
    let mut target_speed = speed;
    for k in 0..=steps {
        points.push(TrajectoryPoint {
            t: k as f64 * dt,
            x,
            y,
            heading,
            speed,
        });
        if remaining == 0 {
            // Draw the next segment: urban-style driving with block-length
            // straights, frequent gentle arcs and occasional sharper turns.
            maneuver = if rng.gen_bool(0.55) {
                let magnitude = if rng.gen_bool(0.3) {
                    rng.gen_range(0.15..0.4) // intersection-grade turn
                } else {
                    rng.gen_range(0.03..0.15) // sweeping arc
                };
                Maneuver::Curve {
                    yaw_rate: magnitude * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                }
            } else {
                Maneuver::Straight
            };
            remaining = rng.gen_range(20..80); // 2-8 s segments
            target_speed = rng.gen_range(6.0..16.0);
        }
        remaining -= 1;
        let yaw_rate = match maneuver {
            Maneuver::Straight => 0.0,
            Maneuver::Curve { yaw_rate } => yaw_rate,
        };
        let accel = (target_speed - speed).clamp(-1.5, 1.5);
        x += speed * heading.cos() * dt;
        y += speed * heading.sin() * dt;
        heading = wrap_angle(heading + yaw_rate * dt);
        speed += accel * dt;
    }
    Trajectory::new(points, dt).expect("generator produces a valid trajectory")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{ekf_predict, CovarianceMatrix, EkfConfig, VehicleState};
    use approx::assert_relative_eq;

    fn two_row_csv() -> &'static str {
        "t,x,y,heading,speed\n0,0,0,0,10\n0.1,1,0,0,10\n"
    }

    #[test]
    fn loads_two_row_file() {
        let traj = Trajectory::from_csv_str(two_row_csv(), 0.1).unwrap();
        assert_eq!(traj.len(), 2);
        assert_relative_eq!(traj.points()[1].x, 1.0);
    }

    #[test]
    fn rejects_decreasing_timestamps() {
        let csv = "t,x,y,heading,speed\n0,0,0,0,10\n-0.1,1,0,0,10\n";
        match Trajectory::from_csv_str(csv, 0.1) {
            Err(SensorError::NonMonotonicTime { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected monotonicity error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_header_mismatch() {
        let csv = "time,x,y,heading,speed\n0,0,0,0,10\n";
        assert!(matches!(Trajectory::from_csv_str(csv, 0.1), Err(SensorError::BadHeader(_))));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let csv = "t,x,y,heading,speed\n0,0,0,0,10\n0.1,oops,0,0,10\n";
        match Trajectory::from_csv_str(csv, 0.1) {
            Err(SensorError::BadRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn resamples_finer_input_to_dt_grid() {
        // 0.05 s spacing resampled at 0.1 s: two samples remain.
        let csv = "t,x,y,heading,speed\n0,0,0,0,10\n0.05,0.5,0,0,10\n0.1,1,0,0,10\n";
        let traj = Trajectory::from_csv_str(csv, 0.1).unwrap();
        assert_eq!(traj.len(), 2);
        assert_relative_eq!(traj.points()[1].t, 0.1);
        assert_relative_eq!(traj.points()[1].x, 1.0);
    }

    #[test]
    fn resampling_interpolates_linearly() {
        // Hand oracle: grid point 0.1 falls between rows at 0.07 and 0.14,
        // fraction 3/7 of the way.
        let csv = "t,x,y,heading,speed\n0,0,0,0,10\n0.07,7,1.4,0.07,11\n0.14,14,2.8,0.14,12\n";
        let traj = Trajectory::from_csv_str(csv, 0.1).unwrap();
        assert_eq!(traj.len(), 2);
        let p = traj.points()[1];
        let frac: f64 = 0.03 / 0.07;
        assert_relative_eq!(p.x, 7.0 + frac * 7.0, epsilon = 1e-9);
        assert_relative_eq!(p.y, 1.4 + frac * 1.4, epsilon = 1e-9);
        assert_relative_eq!(p.heading, 0.07 + frac * 0.07, epsilon = 1e-9);
        assert_relative_eq!(p.speed, 11.0 + frac, epsilon = 1e-9);
    }

    #[test]
    fn heading_interpolation_takes_shortest_arc() {
        use std::f64::consts::PI;
        // 3.1 -> -3.1 rad crosses the wrap; midpoint must sit near pi, not 0.
        let csv = "t,x,y,heading,speed\n0,0,0,3.1,10\n0.2,2,0,-3.1,10\n";
        let traj = Trajectory::from_csv_str(csv, 0.1).unwrap();
        let mid = traj.points()[1].heading;
        assert!(mid.abs() > 3.0, "midpoint heading {mid} should be near +/-pi");
        assert!(mid > -PI && mid <= PI);
    }

    #[test]
    fn imu_zero_on_constant_speed_straight() {
        let traj = Trajectory::from_csv_str(
            "t,x,y,heading,speed\n0,0,0,0,10\n0.1,1,0,0,10\n0.2,2,0,0,10\n",
            0.1,
        )
        .unwrap();
        let cfg = SensorNoiseConfig {
            imu_accel_sigma: 0.0,
            imu_gyro_sigma: 0.0,
            ..Default::default()
        };
        let imu = synthesize_imu(&traj, &cfg);
        assert_eq!(imu.len(), 2);
        for s in imu {
            assert_relative_eq!(s.accel, 0.0);
            assert_relative_eq!(s.yaw_rate, 0.0);
        }
    }

    #[test]
    fn imu_recovers_speed_ramp() {
        // 10 -> 12 m/s over 1 s: accel = 2 every step.
        let mut points = Vec::new();
        for k in 0..=10 {
            let t = k as f64 * 0.1;
            points.push(TrajectoryPoint {
                t,
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                speed: 10.0 + 2.0 * t,
            });
        }
        let traj = Trajectory::new(points, 0.1).unwrap();
        let cfg = SensorNoiseConfig {
            imu_accel_sigma: 0.0,
            imu_gyro_sigma: 0.0,
            ..Default::default()
        };
        for s in synthesize_imu(&traj, &cfg) {
            assert_relative_eq!(s.accel, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sensor_streams_are_deterministic() {
        let traj = synthetic_trajectory(3, 30.0, 0.1);
        let cfg = SensorNoiseConfig {
            seed: 99,
            ..Default::default()
        };
        assert_eq!(synthesize_imu(&traj, &cfg), synthesize_imu(&traj, &cfg));
        assert_eq!(synthesize_gps(&traj, &cfg), synthesize_gps(&traj, &cfg));
    }

    #[test]
    fn gps_equals_truth_without_noise() {
        let traj = synthetic_trajectory(5, 10.0, 0.1);
        let cfg = SensorNoiseConfig {
            gps_sigma: 0.0,
            ..Default::default()
        };
        let fixes = synthesize_gps(&traj, &cfg);
        assert_eq!(fixes.len(), 10);
        for (j, fix) in fixes.iter().enumerate() {
            let idx = (j + 1) * 10;
            assert_relative_eq!(fix.t, traj.points()[idx].t);
            assert_relative_eq!(fix.px, traj.points()[idx].x);
            assert_relative_eq!(fix.py, traj.points()[idx].y);
            assert!(!fix.spoofed);
        }
    }

    #[test]
    fn gps_noise_statistics() {
        // Monte Carlo oracle: sample std per axis within [0.97, 1.03] of
        // the configured sigma over 10000 fixes.
        let mut points = Vec::new();
        for k in 0..=100_000 {
            points.push(TrajectoryPoint {
                t: k as f64 * 0.1,
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                speed: 10.0,
            });
        }
        let traj = Trajectory::new(points, 0.1).unwrap();
        let cfg = SensorNoiseConfig {
            gps_sigma: 1.0,
            seed: 11,
            ..Default::default()
        };
        let fixes = synthesize_gps(&traj, &cfg);
        assert!(fixes.len() >= 10_000);
        let n = fixes.len() as f64;
        for axis in 0..2 {
            let vals: Vec<f64> = fixes.iter().map(|f| if axis == 0 { f.px } else { f.py }).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let std = var.sqrt();
            assert!((0.97..=1.03).contains(&std), "axis {axis} std {std}");
        }
    }

    #[test]
    fn short_trajectory_yields_no_fixes() {
        let traj = Trajectory::from_csv_str(two_row_csv(), 0.1).unwrap();
        assert!(synthesize_gps(&traj, &SensorNoiseConfig::default()).is_empty());
    }

    #[test]
    fn gps_timestamps_align_with_imu() {
        let traj = synthetic_trajectory(8, 45.0, 0.1);
        let cfg = SensorNoiseConfig::default();
        let imu = synthesize_imu(&traj, &cfg);
        let gps = synthesize_gps(&traj, &cfg);
        for fix in &gps {
            assert!(
                imu.iter().any(|s| (s.t - fix.t).abs() < 1e-9),
                "gps fix at {} has no matching imu sample",
                fix.t
            );
        }
    }

    #[test]
    fn noiseless_streams_close_the_loop_with_the_filter() {
        let traj = synthetic_trajectory(17, 100.0, 0.1);
        let cfg = SensorNoiseConfig {
            gps_sigma: 0.0,
            imu_accel_sigma: 0.0,
            imu_gyro_sigma: 0.0,
            ..Default::default()
        };
        let imu = synthesize_imu(&traj, &cfg);
        let ekf_cfg = EkfConfig::from_sigmas(0.1, 1e-9, 1e-9, 1.0).unwrap();
        let p0 = traj.points()[0];
        let mut state = VehicleState::new(p0.x, p0.y, p0.heading, p0.speed);
        let mut cov = CovarianceMatrix::zeros();
        for (k, u) in imu.iter().enumerate() {
            let (s, p) = ekf_predict(&state, &cov, u, &ekf_cfg).unwrap();
            state = s;
            cov = p;
            let truth = traj.points()[k + 1];
            assert!(
                (state.px - truth.x).abs() < 1e-6 && (state.py - truth.y).abs() < 1e-6,
                "drift at step {k}: est ({}, {}) truth ({}, {})",
                state.px,
                state.py,
                truth.x,
                truth.y
            );
        }
    }
}
