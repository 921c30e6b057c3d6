//! Per-trip orchestration: IMU events drive the EKF and the RSU predictor,
//! RSU fixes re-initialize the filter directly, and GPS epochs run feature
//! generation plus detection. A positive verdict isolates GPS and corrects
//! the filter from the GPS-free predictor chain; GPS returns after a run of
//! consecutive benign verdicts.
//!
//! The pipeline is deterministic: it holds no RNG, so identical event
//! streams and configuration reproduce the epoch log byte for byte.

use crate::detector::{
    compute_nees, compute_rsu_features, Chi2Detector, CusumDetector, DetectorError, DetectorId, FeatureVector,
    FeatureWindow, IsolationForest, WindowMode,
};
use crate::estimator::{ekf_predict, ekf_update, CovarianceMatrix, EkfConfig, EstimatorError, GpsFix, ImuSample, VehicleState};
use crate::rsu::{AnchorConfig, RsuError, RsuFix, RsuPredictor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("event at t = {t} arrived after t = {last} was processed")]
    OutOfOrder { t: f64, last: f64 },
    #[error("RSU fix delivered before it was emitted (t_available {available} < t_emitted {emitted})")]
    LatencyViolation { available: f64, emitted: f64 },
    #[error("received an RSU event but infrastructure mode is disabled")]
    RsuDisabled,
    #[error("iforest gate selected but no trained model was provided")]
    MissingForest,
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Rsu(#[from] RsuError),
    #[error("io: {0}")]
    Io(String),
}

/// One event in delivery order. RSU fixes are timed by `t_available`; ties
/// process IMU first, then RSU, then GPS, so detector features always see
/// fully propagated state.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Imu(ImuSample),
    Rsu(RsuFix),
    Gps { fix: GpsFix, truth: [f64; 2] },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::Imu(u) => u.t,
            Event::Rsu(f) => f.t_available,
            Event::Gps { fix, .. } => fix.t,
        }
    }

    pub fn priority(&self) -> u8 {
        match self {
            Event::Imu(_) => 0,
            Event::Rsu(_) => 1,
            Event::Gps { .. } => 2,
        }
    }
}

/// Reinstate GPS after `threshold` consecutive benign verdicts while
/// isolated; the epoch that completes the run is fused normally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinstatePolicy {
    pub threshold: u32,
    streak: u32,
}

impl ReinstatePolicy {
    pub fn new(threshold: u32) -> Self {
        Self {
            threshold: threshold.max(1),
            streak: 0,
        }
    }

    /// Feed one verdict observed while isolated; true means reinstate now.
    pub fn observe(&mut self, benign: bool) -> bool {
        if benign {
            self.streak += 1;
            if self.streak >= self.threshold {
                self.streak = 0;
                return true;
            }
        } else {
            self.streak = 0;
        }
        false
    }

    pub fn reset(&mut self) {
        self.streak = 0;
    }
}

/// Static per-trip configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub ekf: EkfConfig,
    pub anchor: AnchorConfig,
    /// Which detector gates fusion; `None` never isolates (used when
    /// collecting benign training features).
    pub gate: Option<DetectorId>,
    /// When false the pipeline runs as a conventional baseline: no RSU
    /// features, no corrections, isolation only.
    pub infrastructure: bool,
    /// Consecutive benign verdicts required to reinstate GPS.
    pub reinstate_after: u32,
    pub chi2_confidence: f64,
    pub cusum_drift: f64,
    pub cusum_threshold: f64,
    /// Position variance used to seed the predictor before any RSU fix.
    pub initial_position_var: f64,
    /// Combination rule for the forest's feature window.
    pub window_mode: WindowMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ekf: EkfConfig::from_sigmas(0.1, 0.05, 0.005, 1.5).expect("default config is valid"),
            anchor: AnchorConfig::default(),
            gate: Some(DetectorId::IForest),
            infrastructure: true,
            reinstate_after: 3,
            chi2_confidence: 0.95,
            cusum_drift: 3.0,
            cusum_threshold: 10.0,
            initial_position_var: 1.0,
            window_mode: WindowMode::Concat,
        }
    }
}

/// One GPS epoch in the log. Isolation state is the value after the epoch
/// was processed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub t: f64,
    pub nees: f64,
    pub r_rsu: f64,
    pub s_rsu: f64,
    /// +1 attack, -1 benign, 0 not computed.
    pub verdict_iforest: i8,
    pub verdict_chi2: i8,
    pub verdict_cusum: i8,
    pub score_iforest: f64,
    pub score_chi2: f64,
    pub score_cusum: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub spoofed: bool,
    pub isolated: bool,
}

impl EpochRecord {
    pub fn verdict_for(&self, id: DetectorId) -> i8 {
        match id {
            DetectorId::IForest => self.verdict_iforest,
            DetectorId::Chi2 => self.verdict_chi2,
            DetectorId::Cusum => self.verdict_cusum,
        }
    }
}

/// Columns of the per-epoch CSV export.
pub const EPOCH_CSV_HEADER: [&str; 13] = [
    "t",
    "nees",
    "r_rsu",
    "s_rsu",
    "verdict_iforest",
    "verdict_chi2",
    "verdict_cusum",
    "est_x",
    "est_y",
    "true_x",
    "true_y",
    "spoofed",
    "isolated",
];

/// Write an epoch log in the documented CSV layout.
pub fn write_epoch_csv(path: &Path, log: &[EpochRecord]) -> Result<(), PipelineError> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| PipelineError::Io(format!("create {}: {e}", path.display())))?,
    );
    writeln!(out, "{}", EPOCH_CSV_HEADER.join(",")).map_err(|e| PipelineError::Io(e.to_string()))?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.nees,
            r.r_rsu,
            r.s_rsu,
            r.verdict_iforest,
            r.verdict_chi2,
            r.verdict_cusum,
            r.est_x,
            r.est_y,
            r.true_x,
            r.true_y,
            r.spoofed as u8,
            r.isolated as u8
        )
        .map_err(|e| PipelineError::Io(e.to_string()))?;
    }
    out.flush().map_err(|e| PipelineError::Io(e.to_string()))
}

/// The per-trip state machine.
pub struct Pipeline {
    cfg: PipelineConfig,
    forest: Option<Arc<IsolationForest>>,
    state: VehicleState,
    cov: CovarianceMatrix,
    predictor: RsuPredictor,
    window: FeatureWindow,
    chi2: Chi2Detector,
    cusum: CusumDetector,
    reinstate: ReinstatePolicy,
    gps_isolated: bool,
    last_t: f64,
    last_priority: u8,
    epoch_log: Vec<EpochRecord>,
    track: Vec<(f64, [f64; 2])>,
    /// Per-epoch forest verdicts for the vote combination rule.
    vote_buf: std::collections::VecDeque<bool>,
}

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        forest: Option<Arc<IsolationForest>>,
        initial: VehicleState,
        initial_cov: CovarianceMatrix,
        t0: f64,
    ) -> Result<Self, PipelineError> {
        if matches!(cfg.gate, Some(DetectorId::IForest)) && (forest.is_none() || !cfg.infrastructure) {
            return Err(PipelineError::MissingForest);
        }
        cfg.ekf.validate()?;
        if let Some(f) = &forest {
            let expected = match cfg.window_mode {
                WindowMode::Concat => 3 * f.window(),
                WindowMode::Vote => 3,
            };
            if f.dim() != expected {
                return Err(PipelineError::Detector(DetectorError::DimensionMismatch {
                    expected,
                    got: f.dim(),
                }));
            }
        }
        let window_width = forest.as_ref().map(|f| f.window()).unwrap_or(3);
        let chi2 = Chi2Detector::new(2.0, cfg.chi2_confidence)?;
        let cusum = CusumDetector::new(cfg.cusum_drift, cfg.cusum_threshold);
        let predictor = RsuPredictor::seeded(initial, cfg.initial_position_var, t0, &cfg.anchor);
        let reinstate = ReinstatePolicy::new(cfg.reinstate_after);
        Ok(Self {
            cfg,
            forest,
            state: initial,
            cov: initial_cov,
            predictor,
            window: FeatureWindow::new(window_width),
            chi2,
            cusum,
            reinstate,
            gps_isolated: false,
            last_t: t0,
            last_priority: 0,
            epoch_log: Vec::new(),
            track: Vec::new(),
            vote_buf: std::collections::VecDeque::new(),
        })
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn covariance(&self) -> &CovarianceMatrix {
        &self.cov
    }

    pub fn predictor(&self) -> &RsuPredictor {
        &self.predictor
    }

    pub fn is_isolated(&self) -> bool {
        self.gps_isolated
    }

    pub fn epoch_log(&self) -> &[EpochRecord] {
        &self.epoch_log
    }

    /// Estimated position after every IMU step, for trip RMSE.
    pub fn track(&self) -> &[(f64, [f64; 2])] {
        &self.track
    }

    fn check_order(&mut self, event: &Event) -> Result<(), PipelineError> {
        let t = event.time();
        let priority = event.priority();
        if t < self.last_t - 1e-9 || (t <= self.last_t + 1e-9 && priority < self.last_priority) {
            return Err(PipelineError::OutOfOrder { t, last: self.last_t });
        }
        self.last_t = t;
        self.last_priority = priority;
        Ok(())
    }

    pub fn step(&mut self, event: &Event) -> Result<(), PipelineError> {
        self.check_order(event)?;
        match event {
            Event::Imu(u) => self.on_imu(u),
            Event::Rsu(fix) => self.on_rsu(fix),
            Event::Gps { fix, truth } => self.on_gps(fix, *truth),
        }
    }

    fn on_imu(&mut self, u: &ImuSample) -> Result<(), PipelineError> {
        let (state, cov) = ekf_predict(&self.state, &self.cov, u, &self.cfg.ekf)?;
        self.state = state;
        self.cov = cov;
        if self.cfg.infrastructure {
            self.predictor.advance(u, &self.cfg.ekf)?;
        }
        self.track.push((u.t, [self.state.px, self.state.py]));
        Ok(())
    }

    /// Correction case (a): every delivered fix re-initializes the filter
    /// state and covariance directly and re-anchors the predictor.
    fn on_rsu(&mut self, fix: &RsuFix) -> Result<(), PipelineError> {
        if !self.cfg.infrastructure {
            return Err(PipelineError::RsuDisabled);
        }
        if fix.t_available < fix.t_emitted {
            return Err(PipelineError::LatencyViolation {
                available: fix.t_available,
                emitted: fix.t_emitted,
            });
        }
        // Heading and speed are carried over from the filter, so the anchor
        // records the filter's live uncertainty about them, floored by the
        // configured minimums.
        let carried = AnchorConfig {
            heading_var: self.cov.as_matrix()[(2, 2)].max(self.cfg.anchor.heading_var),
            speed_var: self.cov.as_matrix()[(3, 3)].max(self.cfg.anchor.speed_var),
        };
        self.predictor = RsuPredictor::anchored(fix, self.state.heading, self.state.speed, &carried);
        self.state = self.predictor.state;
        self.cov = self.predictor.cov;
        Ok(())
    }

    fn on_gps(&mut self, fix: &GpsFix, truth: [f64; 2]) -> Result<(), PipelineError> {
        let h = EkfConfig::h_matrix();
        let innovation = fix.position() - h * self.state.to_vector();
        let nees = compute_nees(&innovation, &self.cov, &self.cfg.ekf)?;

        let chi2_verdict = self.chi2.verdict(nees);
        let cusum_verdict = self.cusum.step(nees);

        let (r_rsu, s_rsu, iforest_verdict) = if self.cfg.infrastructure {
            let (r_rsu, s_rsu) = compute_rsu_features(&fix.position(), &self.predictor);
            self.window.push(FeatureVector {
                t: fix.t,
                nees,
                r_rsu,
                s_rsu,
            });
            let verdict = match &self.forest {
                Some(forest) => match self.cfg.window_mode {
                    WindowMode::Concat => {
                        let input = self.window.concatenated().expect("window was just pushed");
                        let score = forest.anomaly_score(&input)?;
                        Some((forest.is_positive(score), score))
                    }
                    WindowMode::Vote => {
                        let single = FeatureVector {
                            t: fix.t,
                            nees,
                            r_rsu,
                            s_rsu,
                        };
                        let score = forest.anomaly_score(&single.as_forest_input())?;
                        let width = forest.window();
                        if self.vote_buf.len() == width {
                            self.vote_buf.pop_front();
                        }
                        self.vote_buf.push_back(forest.is_positive(score));
                        // Warm-up mirrors the feature window: the earliest
                        // verdict fills the missing slots.
                        let earliest = *self.vote_buf.front().expect("just pushed");
                        let mut positives = 0usize;
                        for slot in 0..width {
                            let vote = match (self.vote_buf.len() + slot).checked_sub(width) {
                                Some(i) => self.vote_buf[i],
                                None => earliest,
                            };
                            if vote {
                                positives += 1;
                            }
                        }
                        Some((2 * positives > width, score))
                    }
                },
                None => None,
            };
            (r_rsu, s_rsu, verdict)
        } else {
            (f64::NAN, f64::NAN, None)
        };

        let gated_positive = match self.cfg.gate {
            None => false,
            Some(DetectorId::IForest) => iforest_verdict.map(|(p, _)| p).ok_or(PipelineError::MissingForest)?,
            Some(DetectorId::Chi2) => chi2_verdict.is_positive(),
            Some(DetectorId::Cusum) => cusum_verdict.is_positive(),
        };

        if gated_positive {
            self.reinstate.reset();
            if !self.gps_isolated {
                self.gps_isolated = true;
                if self.cfg.infrastructure {
                    // Correction case (b): once, at the transition into
                    // isolation, adopt the GPS-free predictor state.
                    self.state = self.predictor.state;
                    self.cov = self.predictor.cov;
                }
            }
            // The fix is discarded.
        } else if self.gps_isolated {
            if self.reinstate.observe(true) {
                self.gps_isolated = false;
                let (state, cov, _) = ekf_update(&self.state, &self.cov, fix, &self.cfg.ekf)?;
                self.state = state;
                self.cov = cov;
            }
        } else {
            let (state, cov, _) = ekf_update(&self.state, &self.cov, fix, &self.cfg.ekf)?;
            self.state = state;
            self.cov = cov;
        }

        self.epoch_log.push(EpochRecord {
            t: fix.t,
            nees,
            r_rsu,
            s_rsu,
            verdict_iforest: iforest_verdict.map(|(p, _)| if p { 1 } else { -1 }).unwrap_or(0),
            verdict_chi2: chi2_verdict.delta,
            verdict_cusum: cusum_verdict.delta,
            score_iforest: iforest_verdict.map(|(_, s)| s).unwrap_or(f64::NAN),
            score_chi2: chi2_verdict.score,
            score_cusum: cusum_verdict.score,
            est_x: self.state.px,
            est_y: self.state.py,
            true_x: truth[0],
            true_y: truth[1],
            spoofed: fix.spoofed,
            isolated: self.gps_isolated,
        });
        Ok(())
    }
}
