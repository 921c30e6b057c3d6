//! Spoofing detection: per-epoch feature generation (NEES plus the
//! infrastructure-protected residual features), the isolation-forest
//! detector over a sliding window, and the chi-square / CUSUM baselines.

mod forest;

pub use forest::{average_path_length, quantile, ForestParams, IsolationForest, IsolationTree, MODEL_VERSION};

use crate::estimator::{CovarianceMatrix, EkfConfig};
use crate::rsu::RsuPredictor;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("innovation covariance is singular")]
    SingularCovariance,
    #[error("window dimension mismatch: forest expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {need} training samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid detector parameters: {0}")]
    BadParams(String),
    #[error("model file error: {0}")]
    Model(String),
}

/// How the window of feature vectors combines into one verdict: one
/// concatenated forest input (default) or a majority vote over per-epoch
/// verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    Concat,
    Vote,
}

impl Default for WindowMode {
    fn default() -> Self {
        WindowMode::Concat
    }
}

/// Which detector produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorId {
    IForest,
    Chi2,
    Cusum,
}

impl DetectorId {
    pub const ALL: [DetectorId; 3] = [DetectorId::IForest, DetectorId::Chi2, DetectorId::Cusum];

    pub fn label(&self) -> &'static str {
        match self {
            DetectorId::IForest => "iforest",
            DetectorId::Chi2 => "chi2",
            DetectorId::Cusum => "cusum",
        }
    }
}

/// Binary decision plus the raw score it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    /// +1 = attack, -1 = benign.
    pub delta: i8,
    pub score: f64,
    pub detector: DetectorId,
}

impl DetectorVerdict {
    pub fn new(positive: bool, score: f64, detector: DetectorId) -> Self {
        Self {
            delta: if positive { 1 } else { -1 },
            score,
            detector,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.delta > 0
    }
}

/// Per-GPS-epoch detector input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub t: f64,
    /// Normalized estimation error squared of the GPS innovation.
    pub nees: f64,
    /// Euclidean residual between the GPS fix and the RSU prediction (m).
    pub r_rsu: f64,
    /// Determinant of the residual uncertainty (m^4).
    pub s_rsu: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; 3] {
        [self.nees, self.r_rsu, self.s_rsu]
    }

    /// Forest input representation. The residual features stay on their
    /// natural scale (the attack signal lives in their upper tail), while
    /// s_rsu -- a determinant in m^4 spanning many decades -- is
    /// log-compressed so uniform splits don't waste depth on its tail.
    pub fn as_forest_input(&self) -> [f64; 3] {
        [self.nees, self.r_rsu, self.s_rsu.max(1e-12).ln()]
    }
}

/// `NEES = r^T S^-1 r` with `S = H P H^T + R_gps`, where `P` is the EKF
/// covariance at the moment the fix arrives (post-predict, pre-update).
pub fn compute_nees(innovation: &Vector2<f64>, cov: &CovarianceMatrix, cfg: &EkfConfig) -> Result<f64, DetectorError> {
    let s = cov.position_block() + cfg.r_gps;
    let inv = s.try_inverse().ok_or(DetectorError::SingularCovariance)?;
    Ok((innovation.transpose() * inv * innovation)[(0, 0)].max(0.0))
}

/// The protected residual features of a GPS measurement against an RSU
/// prediction `(x, P)` with measurement covariance `r_rsu_cov`:
/// the residual norm and the determinant of `H P H^T + R`.
pub fn rsu_residual_features(
    gps: &Vector2<f64>,
    predicted: &Vector2<f64>,
    position_cov: &Matrix2<f64>,
    r_rsu_cov: &Matrix2<f64>,
) -> (f64, f64) {
    let residual = gps - predicted;
    let s = position_cov + r_rsu_cov;
    (residual.norm(), s.determinant())
}

/// Feature pair from the live predictor; the anchoring fix's covariance
/// plays the role of the RSU measurement noise.
pub fn compute_rsu_features(gps: &Vector2<f64>, predictor: &RsuPredictor) -> (f64, f64) {
    rsu_residual_features(
        gps,
        &predictor.state.position(),
        &predictor.cov.position_block(),
        &predictor.anchor_cov,
    )
}

/// Sliding window of the last `W` feature vectors, oldest first. Until the
/// window fills, the earliest available vector is repeated.
#[derive(Debug, Clone)]
pub struct FeatureWindow {
    width: usize,
    buf: VecDeque<FeatureVector>,
}

impl FeatureWindow {
    pub fn new(width: usize) -> Self {
        assert!(width >= 1, "window width must be at least 1");
        Self {
            width,
            buf: VecDeque::with_capacity(width),
        }
    }

    pub fn push(&mut self, f: FeatureVector) {
        if self.buf.len() == self.width {
            self.buf.pop_front();
        }
        self.buf.push_back(f);
    }

    /// Flat `3 * W` forest input, oldest epoch first; `None` before any
    /// epoch exists.
    pub fn concatenated(&self) -> Option<Vec<f64>> {
        let earliest = self.buf.front()?;
        let mut out = Vec::with_capacity(3 * self.width);
        for slot in 0..self.width {
            let idx = (self.buf.len() + slot).checked_sub(self.width);
            let f = match idx {
                Some(i) => &self.buf[i],
                None => earliest,
            };
            out.extend_from_slice(&f.as_forest_input());
        }
        Some(out)
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }
}

/// Chi-square test on NEES at a configured confidence level.
#[derive(Debug, Clone)]
pub struct Chi2Detector {
    threshold: f64,
    dist: ChiSquared,
}

impl Chi2Detector {
    pub fn new(dof: f64, confidence: f64) -> Result<Self, DetectorError> {
        let dist = ChiSquared::new(dof).map_err(|e| DetectorError::BadParams(e.to_string()))?;
        let threshold = if confidence >= 1.0 {
            f64::INFINITY
        } else {
            dist.inverse_cdf(confidence.max(0.0))
        };
        Ok(Self { threshold, dist })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Positive iff `nees` exceeds the inverse-CDF threshold; the score is
    /// the CDF value, so the rule reads `score > confidence`.
    pub fn verdict(&self, nees: f64) -> DetectorVerdict {
        DetectorVerdict::new(nees > self.threshold, self.dist.cdf(nees), DetectorId::Chi2)
    }
}

/// One-sided CUSUM on NEES with drift `b` and alarm threshold `tau`;
/// the statistic resets after each alarm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumDetector {
    pub drift: f64,
    pub threshold: f64,
    g: f64,
}

impl CusumDetector {
    pub fn new(drift: f64, threshold: f64) -> Self {
        Self {
            drift,
            threshold,
            g: 0.0,
        }
    }

    pub fn statistic(&self) -> f64 {
        self.g
    }

    pub fn reset(&mut self) {
        self.g = 0.0;
    }

    pub fn step(&mut self, nees: f64) -> DetectorVerdict {
        self.g = (self.g + nees - self.drift).max(0.0);
        let positive = self.g > self.threshold;
        let score = if self.threshold > 0.0 {
            self.g / (self.g + self.threshold)
        } else if self.g > 0.0 {
            1.0
        } else {
            0.0
        };
        if positive {
            self.g = 0.0;
        }
        DetectorVerdict::new(positive, score, DetectorId::Cusum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn nees_zero_innovation() {
        let cfg = EkfConfig::from_sigmas(0.1, 0.05, 0.005, 1.5).unwrap();
        let cov = CovarianceMatrix::from_diagonal([1.0, 1.0, 0.01, 0.25]);
        let nees = compute_nees(&Vector2::zeros(), &cov, &cfg).unwrap();
        assert_relative_eq!(nees, 0.0);
    }

    #[test]
    fn nees_quadratic_form_example() {
        // r = (3, 4), S = 25 I -> (9 + 16) / 25 = 1.
        let mut cfg = EkfConfig::from_sigmas(0.1, 0.05, 0.005, 1.0).unwrap();
        cfg.r_gps = Matrix2::identity() * 20.0;
        let cov = CovarianceMatrix::from_diagonal([5.0, 5.0, 0.01, 0.25]);
        let nees = compute_nees(&Vector2::new(3.0, 4.0), &cov, &cfg).unwrap();
        assert_relative_eq!(nees, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nees_chi2_mean_on_calibrated_draws() {
        // Monte Carlo oracle: innovations drawn from N(0, S) give NEES with
        // chi-square(2) statistics: mean 2 within +-0.15 over 5000 draws.
        let mut cfg = EkfConfig::from_sigmas(0.1, 0.05, 0.005, 1.5).unwrap();
        cfg.r_gps = Matrix2::new(2.25, 0.3, 0.3, 1.8);
        let cov = CovarianceMatrix::from_diagonal([0.8, 0.5, 0.01, 0.25]);
        let s = cov.position_block() + cfg.r_gps;
        let chol = nalgebra::Cholesky::new(s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 5000;
        let mut sum = 0.0;
        for _ in 0..n {
            let z = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
            let r = chol.l() * z;
            sum += compute_nees(&r, &cov, &cfg).unwrap();
        }
        let mean = sum / n as f64;
        assert!((mean - 2.0).abs() < 0.15, "mean NEES {mean}");
    }

    #[test]
    fn rsu_features_zero_residual_and_determinant() {
        let (r, s) = rsu_residual_features(
            &Vector2::new(5.0, 5.0),
            &Vector2::new(5.0, 5.0),
            &Matrix2::zeros(),
            &Matrix2::new(2.0, 0.0, 0.0, 3.0),
        );
        assert_relative_eq!(r, 0.0);
        assert_relative_eq!(s, 6.0);
    }

    #[test]
    fn rsu_residual_separates_four_meter_spoof() {
        // Sub-meter prediction error vs a 4 m spoof offset: the residual
        // exceeds 3 m in at least 99% of trials.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred_err = Normal::new(0.0, 0.25).unwrap();
        let trials = 10_000;
        let mut hits = 0;
        for _ in 0..trials {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let spoofed = Vector2::new(4.0 * angle.cos(), 4.0 * angle.sin());
            let predicted = Vector2::new(pred_err.sample(&mut rng), pred_err.sample(&mut rng));
            let (r, _) = rsu_residual_features(&spoofed, &predicted, &Matrix2::zeros(), &Matrix2::identity());
            if r >= 3.0 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.99 * trials as f64, "{hits}/{trials}");
    }

    #[test]
    fn window_pads_by_repeating_earliest() {
        let mut win = FeatureWindow::new(3);
        assert!(win.concatenated().is_none());
        let f = |t: f64| FeatureVector {
            t,
            nees: t,
            r_rsu: 10.0 + t,
            s_rsu: 100.0 + t,
        };
        let fi = |t: f64| f(t).as_forest_input().to_vec();
        win.push(f(1.0));
        assert_eq!(win.concatenated().unwrap(), [fi(1.0), fi(1.0), fi(1.0)].concat());
        win.push(f(2.0));
        assert_eq!(win.concatenated().unwrap(), [fi(1.0), fi(1.0), fi(2.0)].concat());
        win.push(f(3.0));
        win.push(f(4.0));
        assert_eq!(win.concatenated().unwrap(), [fi(2.0), fi(3.0), fi(4.0)].concat());
    }

    #[test]
    fn chi2_thresholds_and_verdicts() {
        let det = Chi2Detector::new(2.0, 0.95).unwrap();
        // Closed-form oracle for dof 2: -2 ln(1 - p), to the three decimals
        // the threshold is quoted at.
        let expected = -2.0 * (1.0f64 - 0.95).ln();
        assert!((det.threshold() - expected).abs() < 5e-4);
        assert!((det.threshold() - 5.991).abs() < 5e-4);
        assert_eq!(det.verdict(0.0).delta, -1);
        assert_eq!(det.verdict(6.1).delta, 1);
        let open = Chi2Detector::new(2.0, 1.0).unwrap();
        assert_eq!(open.verdict(1e12).delta, -1);
    }

    #[test]
    fn chi2_benign_positive_rate() {
        // Calibrated NEES draws alarm ~5% of the time at 95% confidence.
        let det = Chi2Detector::new(2.0, 0.95).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 20_000;
        let mut positives = 0;
        for _ in 0..n {
            let a: f64 = normal.sample(&mut rng);
            let b: f64 = normal.sample(&mut rng);
            let nees = a * a + b * b;
            if det.verdict(nees).is_positive() {
                positives += 1;
            }
        }
        let rate = positives as f64 / n as f64;
        assert!((0.03..=0.07).contains(&rate), "rate {rate}");
    }

    #[test]
    fn cusum_drift_cancellation() {
        let mut det = CusumDetector::new(3.0, 10.0);
        for _ in 0..100 {
            let v = det.step(3.0);
            assert_eq!(v.delta, -1);
            assert_relative_eq!(det.statistic(), 0.0);
        }
    }

    #[test]
    fn cusum_first_alarm_timing() {
        // nees = b + 1 each step with tau = 10: g reaches 11 at step 11.
        let mut det = CusumDetector::new(3.0, 10.0);
        let mut first_alarm = None;
        for step in 1..=20 {
            if det.step(4.0).is_positive() {
                first_alarm = Some(step);
                break;
            }
        }
        assert_eq!(first_alarm, Some(11));
        // Resets after the alarm.
        assert_relative_eq!(det.statistic(), 0.0);
    }

    #[test]
    fn cusum_degenerate_params_alarm_on_any_positive() {
        let mut det = CusumDetector::new(0.0, 0.0);
        assert_eq!(det.step(0.0).delta, -1);
        assert_eq!(det.step(0.1).delta, 1);
    }

    #[test]
    fn forest_normalizer_closed_forms() {
        assert_relative_eq!(average_path_length(2), 1.0);
        let gamma = 0.577_215_664_901_532_9;
        let expected_256 = 2.0 * (255.0f64.ln() + gamma) - 2.0 * 255.0 / 256.0;
        assert!((average_path_length(256) - expected_256).abs() < 1e-9);
        let expected_64 = 2.0 * (63.0f64.ln() + gamma) - 2.0 * 63.0 / 64.0;
        assert!((average_path_length(64) - expected_64).abs() < 1e-9);
        assert_relative_eq!(average_path_length(1), 0.0);
        assert_relative_eq!(average_path_length(0), 0.0);
    }

    fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
            .collect()
    }

    #[test]
    fn forest_degenerate_constant_training() {
        // All-identical training points: every tree is a single leaf, all
        // scores equal 0.5, and a larger point scores no higher.
        let samples = vec![vec![1.0, 2.0, 3.0]; 50];
        let params = ForestParams {
            subsample: 16,
            ..Default::default()
        };
        let forest = IsolationForest::train(&samples, &params, 1).unwrap();
        let trained_score = forest.anomaly_score(&samples[0]).unwrap();
        assert_relative_eq!(trained_score, 0.5, epsilon = 1e-12);
        let larger = forest.anomaly_score(&[10.0, 20.0, 30.0]).unwrap();
        assert!(larger <= trained_score + 1e-12);
    }

    #[test]
    fn forest_threshold_is_training_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = gaussian_cloud(&mut rng, 400, 3);
        let params = ForestParams {
            alpha: 0.2,
            subsample: 128,
            ..Default::default()
        };
        let forest = IsolationForest::train(&samples, &params, 5).unwrap();
        // Independent quantile recomputation over the training scores.
        let mut scores: Vec<f64> = samples.iter().map(|s| forest.anomaly_score(s).unwrap()).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = 0.8 * (scores.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let frac = pos - lo as f64;
        let expected = scores[lo] * (1.0 - frac) + scores[hi] * frac;
        assert_relative_eq!(forest.threshold(), expected, epsilon = 1e-12);
    }

    #[test]
    fn forest_flags_planted_outlier() {
        // 20 inliers from N(0, I) plus one point far outside: the outlier
        // gets the top anomaly score in at least 95 of 100 seeds.
        let mut wins = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = gaussian_cloud(&mut rng, 20, 3);
            samples.push(vec![10.0, 10.0, 10.0]);
            let params = ForestParams {
                trees: 100,
                subsample: 21,
                alpha: 0.2,
                window: 1,
            };
            let forest = IsolationForest::train(&samples, &params, seed ^ 0xabcd).unwrap();
            let scores: Vec<f64> = samples.iter().map(|s| forest.anomaly_score(s).unwrap()).collect();
            let outlier = scores[20];
            if scores[..20].iter().all(|&s| s < outlier) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "outlier ranked first in only {wins}/100 seeds");
    }

    #[test]
    fn forest_scores_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = gaussian_cloud(&mut rng, 300, 9);
        let forest = IsolationForest::train(&samples, &ForestParams::default(), 9).unwrap();
        for s in &samples {
            let score = forest.anomaly_score(s).unwrap();
            assert!(score > 0.0 && score < 1.0, "score {score}");
        }
        let far = forest.anomaly_score(&vec![50.0; 9]).unwrap();
        assert!(far > 0.0 && far < 1.0);
    }

    #[test]
    fn forest_outliers_score_higher_than_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples = gaussian_cloud(&mut rng, 500, 3);
        let forest = IsolationForest::train(&samples, &ForestParams::default(), 11).unwrap();
        let inlier = forest.anomaly_score(&[0.0, 0.0, 0.0]).unwrap();
        let outlier = forest.anomaly_score(&[8.0, -8.0, 8.0]).unwrap();
        assert!(outlier > inlier, "outlier {outlier} vs inlier {inlier}");
    }

    #[test]
    fn forest_training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = gaussian_cloud(&mut rng, 300, 3);
        let a = IsolationForest::train(&samples, &ForestParams::default(), 77).unwrap();
        let b = IsolationForest::train(&samples, &ForestParams::default(), 77).unwrap();
        for s in samples.iter().take(50) {
            assert_eq!(a.anomaly_score(s).unwrap(), b.anomaly_score(s).unwrap());
        }
        assert_eq!(a.threshold(), b.threshold());
    }

    #[test]
    fn forest_positive_rate_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let samples = gaussian_cloud(&mut rng, 500, 3);
        let test = gaussian_cloud(&mut rng, 500, 3);
        let mut rates = Vec::new();
        for alpha in [0.1, 0.2, 0.3] {
            let params = ForestParams {
                alpha,
                ..Default::default()
            };
            let forest = IsolationForest::train(&samples, &params, 55).unwrap();
            let positives = test
                .iter()
                .filter(|s| forest.is_positive(forest.anomaly_score(s).unwrap()))
                .count();
            rates.push(positives);
        }
        assert!(rates[0] <= rates[1] && rates[1] <= rates[2], "rates {rates:?}");
    }

    #[test]
    fn forest_dimension_mismatch_rejected() {
        let samples = vec![vec![0.0; 9]; 50];
        let forest = IsolationForest::train(&samples, &ForestParams::default(), 1).unwrap();
        assert!(matches!(
            forest.anomaly_score(&[1.0, 2.0]),
            Err(DetectorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn forest_too_few_samples_rejected() {
        let samples = vec![vec![0.0; 3]];
        assert!(matches!(
            IsolationForest::train(&samples, &ForestParams::default(), 1),
            Err(DetectorError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn forest_model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = gaussian_cloud(&mut rng, 300, 9);
        let forest = IsolationForest::train(&samples, &ForestParams::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        forest.save(&path).unwrap();
        let loaded = IsolationForest::load(&path).unwrap();
        for s in samples.iter().take(25) {
            assert_eq!(forest.anomaly_score(s).unwrap(), loaded.anomaly_score(s).unwrap());
        }
        assert_eq!(forest.threshold(), loaded.threshold());

        // Version check.
        let mut raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        raw["version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&raw).unwrap()).unwrap();
        assert!(IsolationForest::load(&path).is_err());
    }
}
