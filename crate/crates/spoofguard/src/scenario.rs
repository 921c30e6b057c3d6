//! Scenario configuration: a flat-sectioned TOML file mapping onto the
//! module configs, plus validation. CLI flags may override individual
//! values after loading. The committed JSON schema in `schema/` documents
//! the same structure.

use crate::attack::AttackMenu;
use crate::detector::DetectorId;
use crate::estimator::{EkfConfig, EstimatorError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

fn default_dt() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub repetitions: usize,
    /// Worker threads for batch execution; 0 uses the rayon default.
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 42,
            repetitions: 5,
            workers: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub count: usize,
    pub duration_min: f64,
    pub duration_max: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            count: 20,
            duration_min: 60.0,
            duration_max: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoriesSection {
    /// Explicit trajectory CSV files; evaluated in addition to any
    /// synthetic ones.
    pub paths: Vec<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorsSection {
    pub dt: f64,
    pub gps_sigma: f64,
    pub imu_accel_sigma: f64,
    pub imu_gyro_sigma: f64,
}

impl Default for SensorsSection {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            gps_sigma: 1.5,
            imu_accel_sigma: 0.005,
            imu_gyro_sigma: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfSection {
    pub init_pos_var: f64,
    pub init_heading_var: f64,
    pub init_speed_var: f64,
}

impl Default for EkfSection {
    fn default() -> Self {
        Self {
            init_pos_var: 1.0,
            init_heading_var: 0.01,
            init_speed_var: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsuSection {
    /// Distance between consecutive sites D_RSU (m).
    pub spacing: f64,
    /// Service radius d_RSU (m).
    pub service_radius: f64,
    /// Range noise sigma_RSU (m).
    pub sigma_range: f64,
    pub broadcast_rate: f64,
    /// Range-sequence length `o`; localization uses `o + 1` samples
    /// (default 100 = 10 s of broadcasts, the motion baseline that keeps
    /// cross-range error sub-meter across the service area).
    pub window_len: usize,
    /// Secure-channel latency (s).
    pub channel_latency: f64,
    /// Fixes produced per second while in range.
    pub fix_rate: f64,
    /// A computed fix is broadcast only when the trace of its position
    /// covariance stays below this bound (m^2); poorly conditioned
    /// geometry (radial approach to a site) falls back to the predictor.
    pub fix_quality_max: f64,
    pub anchor_heading_var: f64,
    pub anchor_speed_var: f64,
    /// Explicit site layout overriding arc-length placement.
    pub sites: Option<Vec<[f64; 2]>>,
}

impl Default for RsuSection {
    fn default() -> Self {
        Self {
            spacing: 1500.0,
            service_radius: 500.0,
            sigma_range: 0.25,
            broadcast_rate: 10.0,
            window_len: 100,
            channel_latency: 0.1,
            fix_rate: 1.0,
            fix_quality_max: 4.0,
            anchor_heading_var: 2.5e-5,
            anchor_speed_var: 0.04,
            sites: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: AttackMenu,
    /// Fixed window [t_s, t_e] relative to trip start; random when absent.
    pub window: Option<[f64; 2]>,
    /// Lateral bias magnitude for constant-bias attacks (m).
    pub bias: f64,
    pub stealthy_m: f64,
    pub stealthy_n: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: AttackMenu::ConstantBias,
            window: None,
            bias: 4.0,
            stealthy_m: 1.0,
            stealthy_n: 1.07,
        }
    }
}

pub use crate::detector::WindowMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    /// Gate of the infrastructure-defended run.
    pub selected: DetectorId,
    /// Trained forest model path.
    pub model: Option<PathBuf>,
    pub alpha: f64,
    pub window: usize,
    pub trees: usize,
    pub subsample: usize,
    pub window_mode: WindowMode,
    /// Consecutive benign verdicts required to reinstate GPS.
    pub reinstate_after: u32,
    pub chi2_confidence: f64,
    pub cusum_drift: f64,
    pub cusum_threshold: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            selected: DetectorId::IForest,
            model: None,
            alpha: 0.2,
            window: 3,
            trees: 100,
            subsample: 256,
            window_mode: WindowMode::Concat,
            reinstate_after: 3,
            chi2_confidence: 0.95,
            cusum_drift: 3.0,
            cusum_threshold: 10.0,
        }
    }
}

/// The full scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub run: RunSection,
    pub trajectories: TrajectoriesSection,
    pub sensors: SensorsSection,
    pub ekf: EkfSection,
    pub rsu: RsuSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
}

impl Default for ScenarioConfig {
    /// The default harness: the synthetic trajectory fleet with all module
    /// defaults. (When deserializing, a file that sets only explicit paths
    /// keeps `synthetic` empty; `load` restores the fleet only when no
    /// trajectories are configured at all.)
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            trajectories: TrajectoriesSection {
                paths: Vec::new(),
                synthetic: Some(SyntheticSection::default()),
            },
            sensors: SensorsSection::default(),
            ekf: EkfSection::default(),
            rsu: RsuSection::default(),
            attack: AttackSection::default(),
            detector: DetectorSection::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&raw).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        // A config with neither explicit paths nor a synthetic block gets
        // the default synthetic fleet.
        if cfg.trajectories.paths.is_empty() && cfg.trajectories.synthetic.is_none() {
            cfg.trajectories.synthetic = Some(SyntheticSection::default());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |msg: String| Err(ScenarioError::Invalid(msg));
        if !(self.sensors.dt > 0.0) {
            return invalid(format!("sensors.dt must be positive, got {}", self.sensors.dt));
        }
        for (name, v) in [
            ("sensors.gps_sigma", self.sensors.gps_sigma),
            ("sensors.imu_accel_sigma", self.sensors.imu_accel_sigma),
            ("sensors.imu_gyro_sigma", self.sensors.imu_gyro_sigma),
        ] {
            if v < 0.0 {
                return invalid(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.rsu.spacing > 0.0) || !(self.rsu.service_radius > 0.0) || !(self.rsu.sigma_range > 0.0) {
            return invalid("rsu spacing, service_radius and sigma_range must be positive".into());
        }
        if self.rsu.window_len < 2 {
            return invalid(format!("rsu.window_len must be at least 2, got {}", self.rsu.window_len));
        }
        if self.rsu.channel_latency < 0.0 {
            return invalid("rsu.channel_latency must be non-negative".into());
        }
        if !(self.detector.alpha > 0.0 && self.detector.alpha < 1.0) {
            return invalid(format!("detector.alpha must lie in (0, 1), got {}", self.detector.alpha));
        }
        if self.detector.window == 0 || self.detector.trees == 0 {
            return invalid("detector.window and detector.trees must be positive".into());
        }
        if self.detector.reinstate_after == 0 {
            return invalid("detector.reinstate_after must be at least 1".into());
        }
        if let Some([a, b]) = self.attack.window {
            if !(a < b) {
                return invalid(format!("attack.window must satisfy t_s < t_e, got [{a}, {b}]"));
            }
        }
        if !(self.attack.stealthy_n > 1.0) || !(self.attack.stealthy_m > 0.0) {
            return invalid("attack stealthy parameters need m > 0 and n > 1".into());
        }
        if let Some(synth) = &self.trajectories.synthetic {
            if synth.count == 0 || !(synth.duration_min > 0.0) || synth.duration_max < synth.duration_min {
                return invalid("trajectories.synthetic needs count > 0 and a valid duration range".into());
            }
        }
        for path in &self.trajectories.paths {
            if !path.exists() {
                return invalid(format!("trajectory file {} does not exist", path.display()));
            }
        }
        // EKF config must construct cleanly from the sensor sigmas.
        self.ekf_config()?;
        Ok(())
    }

    /// Filter noise derived from the sensor configuration (the correctly
    /// configured Q / R_gps case). Zero sigmas get a tiny floor so the
    /// matrices stay positive definite.
    pub fn ekf_config(&self) -> Result<EkfConfig, EstimatorError> {
        EkfConfig::from_sigmas(
            self.sensors.dt,
            self.sensors.imu_accel_sigma.max(1e-9),
            self.sensors.imu_gyro_sigma.max(1e-9),
            self.sensors.gps_sigma.max(1e-9),
        )
    }

    pub fn initial_cov_diag(&self) -> [f64; 4] {
        [
            self.ekf.init_pos_var,
            self.ekf.init_pos_var,
            self.ekf.init_heading_var,
            self.ekf.init_speed_var,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ScenarioConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ScenarioConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn loads_minimal_file_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.toml");
        std::fs::write(&path, "[run]\nseed = 7\n").unwrap();
        let cfg = ScenarioConfig::load(&path).unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.rsu.spacing, 1500.0);
        assert!(cfg.trajectories.synthetic.is_some());
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = toml::from_str::<ScenarioConfig>("[run]\nseedd = 7\n");
        assert!(err.is_err());
    }

    #[test]
    fn rejects_invalid_ranges() {
        let mut cfg = ScenarioConfig::default();
        cfg.detector.alpha = 1.5;
        assert!(matches!(cfg.validate(), Err(ScenarioError::Invalid(_))));
        let mut cfg = ScenarioConfig::default();
        cfg.rsu.window_len = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.attack.window = Some([10.0, 5.0]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_trajectory_file_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.trajectories.paths.push(PathBuf::from("/nonexistent/t.csv"));
        assert!(cfg.validate().is_err());
    }
}
