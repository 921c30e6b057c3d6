//! Roadside-unit infrastructure: site placement along a route, range
//! measurement synthesis with an SNR diagnostic, single-site localization
//! from a short range history plus odometry, a GPS-free location predictor,
//! and the secure-channel envelope (serialization + fixed latency).
//!
//! Nothing in this module reads a GPS fix; the predictor chain stays
//! uncontaminated by construction.

use crate::estimator::{ekf_predict, CovarianceMatrix, EkfConfig, EstimatorError, ImuSample, VehicleState};
use crate::sensors::Trajectory;
use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Ranges are clamped away from zero after noise injection (m).
pub const MIN_RANGE_M: f64 = 0.01;
/// Gauss-Newton iteration cap.
pub const MAX_GN_ITERATIONS: usize = 50;
/// When the prior sits at least this far from the anchor baseline, its
/// side of an otherwise-unresolved reflection ambiguity is trusted; dead
/// reckoning between anchors stays well inside this margin.
pub const AMBIGUITY_TRUST_MARGIN_M: f64 = 25.0;

#[derive(Debug, Error)]
pub enum RsuError {
    #[error("need at least {need} range samples, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("localization did not converge within {MAX_GN_ITERATIONS} iterations (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("range sample at t = {t} has no matching odometry sample")]
    OdometryGap { t: f64 },
    #[error("envelope decode failed: {0}")]
    Envelope(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// A fixed roadside unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsuSite {
    pub id: usize,
    /// World coordinates (m).
    pub coord: [f64; 2],
    /// Broadcast service radius d_RSU (m).
    pub service_radius: f64,
    /// Range broadcasts per second.
    pub broadcast_rate: f64,
}

impl RsuSite {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.coord[0], self.coord[1])
    }

    pub fn in_range(&self, p: &Vector2<f64>) -> bool {
        (p - self.position()).norm() <= self.service_radius
    }
}

/// One received range broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSample {
    pub t: f64,
    pub rsu_id: usize,
    /// Measured distance (m), always positive.
    pub range: f64,
    /// Logged diagnostic: 10*log10(range^2 / sigma^2) in dB.
    pub snr: f64,
}

/// An infrastructure-derived global position with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsuFix {
    /// When the fix was computed on the infrastructure side (s).
    pub t_emitted: f64,
    /// When it becomes visible to the vehicle (s).
    pub t_available: f64,
    pub position: [f64; 2],
    /// 2x2 position covariance (m^2).
    pub covariance: Matrix2<f64>,
}

impl RsuFix {
    pub fn position_vec(&self) -> Vector2<f64> {
        Vector2::new(self.position[0], self.position[1])
    }
}

/// Heading/speed variance used when anchoring the predictor; the RSU
/// measures position only, so these are carried over from the vehicle's own
/// local state with configured uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub heading_var: f64,
    pub speed_var: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            heading_var: 2.5e-5,
            speed_var: 0.04,
        }
    }
}

/// Place sites every `spacing` meters of arc length along the trajectory,
/// starting at arc 0.
pub fn place_rsus(traj: &Trajectory, spacing: f64, service_radius: f64, broadcast_rate: f64) -> Vec<RsuSite> {
    assert!(spacing > 0.0, "RSU spacing must be positive");
    let arcs = traj.arc_lengths();
    let total = *arcs.last().unwrap_or(&0.0);
    let points = traj.points();
    let mut sites = Vec::new();
    let mut target = 0.0;
    let mut seg = 0usize;
    while target <= total + 1e-6 {
        while seg + 1 < arcs.len() && arcs[seg + 1] < target {
            seg += 1;
        }
        let (a, b) = (points[seg], points[(seg + 1).min(points.len() - 1)]);
        let seg_len = (arcs[(seg + 1).min(arcs.len() - 1)] - arcs[seg]).max(1e-12);
        let frac = ((target - arcs[seg]) / seg_len).clamp(0.0, 1.0);
        sites.push(RsuSite {
            id: sites.len(),
            coord: [a.x + (b.x - a.x) * frac, a.y + (b.y - a.y) * frac],
            service_radius,
            broadcast_rate,
        });
        target += spacing;
    }
    sites
}

/// Synthesize one range broadcast, or nothing when the vehicle is outside
/// the service radius. The SNR diagnostic follows the noisy range.
pub fn sample_range<R: Rng>(
    t: f64,
    truth_pos: &Vector2<f64>,
    site: &RsuSite,
    sigma: f64,
    rng: &mut R,
) -> Option<RangeSample> {
    let true_dist = (truth_pos - site.position()).norm();
    if true_dist > site.service_radius {
        return None;
    }
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("sigma >= 0");
    let range = (true_dist + noise.sample(rng)).max(MIN_RANGE_M);
    let snr = 10.0 * (range * range / (sigma * sigma)).log10();
    Some(RangeSample {
        t,
        rsu_id: site.id,
        range,
        snr,
    })
}

/// Dead-reckon backward from the prior through the odometry, returning the
/// displacement of each range-sample epoch relative to the newest one.
fn relative_positions(
    ranges: &[RangeSample],
    odometry: &[ImuSample],
    prior: &VehicleState,
    dt: f64,
) -> Result<Vec<Vector2<f64>>, RsuError> {
    let newest_t = ranges[ranges.len() - 1].t;
    let mut rel = vec![Vector2::zeros(); ranges.len()];
    let mut cursor = ranges.len() - 1; // rel[last] = 0 by definition
    let mut pos = Vector2::zeros();
    let mut heading = prior.heading;
    let mut speed = prior.speed;
    // Walk odometry newest-first; each sample covers (t - dt, t].
    for u in odometry.iter().rev() {
        if u.t > newest_t + 1e-9 {
            continue;
        }
        if cursor == 0 {
            break;
        }
        // Invert the forward Euler step.
        speed -= u.accel * dt;
        heading = crate::estimator::wrap_angle(heading - u.yaw_rate * dt);
        pos.x -= speed * heading.cos() * dt;
        pos.y -= speed * heading.sin() * dt;
        let t_prev = u.t - dt;
        while cursor > 0 && ranges[cursor - 1].t > t_prev - 1e-6 {
            cursor -= 1;
            if (ranges[cursor].t - t_prev).abs() > 1e-6 {
                return Err(RsuError::OdometryGap { t: ranges[cursor].t });
            }
            rel[cursor] = pos;
        }
    }
    if cursor > 0 {
        return Err(RsuError::OdometryGap { t: ranges[cursor - 1].t });
    }
    Ok(rel)
}

/// Recover the current global position from the last `o + 1` ranges of one
/// site plus the odometry spanning them: nonlinear least squares on
/// `||p + a(x) rel_i - site|| - z_i`, Gauss-Newton with backtracking from
/// the prior-provided initial guess. Besides the position, the solve
/// estimates a rotation and log-scale alignment of the dead-reckoned leg:
/// the prior's initial heading and speed errors rotate and stretch the
/// whole constellation coherently, and leaving them unmodeled biases long
/// windows far beyond the range noise. Both carry Gaussian priors
/// (`prior_heading_std`, a few-percent scale) so degenerate geometry stays
/// regularized.
pub fn localize_from_ranges(
    ranges: &[RangeSample],
    site: &RsuSite,
    odometry: &[ImuSample],
    prior: &VehicleState,
    prior_heading_std: f64,
    sigma: f64,
    dt: f64,
) -> Result<RsuFix, RsuError> {
    if ranges.len() < 3 {
        return Err(RsuError::InsufficientData {
            need: 3,
            got: ranges.len(),
        });
    }
    let rel = relative_positions(ranges, odometry, prior, dt)?;
    let problem = RangeProblem {
        rel: &rel,
        ranges,
        site: site.position(),
        sigma: sigma.max(1e-6),
        heading_prior_std: prior_heading_std.clamp(1e-4, 0.5),
        log_scale_prior_std: 0.03,
    };

    // Single-site ranging has a reflection ambiguity across the anchor
    // baseline. Solve from the prior and from its mirror image, then pick:
    // a decisive cost split means the motion broke the symmetry and the
    // data decide; otherwise the solution nearer the prior wins. The
    // unresolved spread is folded into the covariance only when the prior
    // sits close enough to the baseline that its side could be wrong --
    // far from the baseline, continuity with the prior settles it.
    let anchors: Vec<Vector2<f64>> = rel.iter().map(|r| site.position() - r).collect();
    let from_prior = problem
        .solve(prior.position())
        .ok_or(RsuError::NoConvergence { residual: f64::NAN })?;
    let (centroid, principal) = anchor_baseline(&anchors);
    let offset = prior.position() - centroid;
    let prior_perp_distance = (offset - principal * principal.dot(&offset)).norm();
    let mirrored_start = centroid + principal * principal.dot(&offset) * 2.0 - offset;
    let alternative = problem.solve(mirrored_start);

    // Whitened costs are chi-square distributed with ~n degrees of
    // freedom; the margin must clear their noise floor before a cost gap
    // counts as a genuine misfit.
    let decisive_margin = 25.0 + 3.0 * (2.0 * ranges.len() as f64).sqrt();
    let mut ambiguity: Option<Vector2<f64>> = None;
    let chosen = match alternative {
        Some(alt) if (alt.position - from_prior.position).norm() > 0.5 => {
            if (from_prior.cost - alt.cost).abs() > decisive_margin {
                if alt.cost < from_prior.cost {
                    alt
                } else {
                    from_prior
                }
            } else {
                if prior_perp_distance < AMBIGUITY_TRUST_MARGIN_M {
                    ambiguity = Some((alt.position - from_prior.position) * 0.5);
                }
                from_prior
            }
        }
        _ => from_prior,
    };

    // Marginal position covariance from the whitened normal matrix, plus
    // the unresolved-mirror spread, with eigenvalues capped at the service
    // radius squared: a fix can never be less informative than "somewhere
    // inside the broadcast circle".
    let cap = site.service_radius * site.service_radius;
    let mut cov = chosen.position_cov;
    if let Some(half_gap) = ambiguity {
        cov += half_gap * half_gap.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let mut cov = Matrix2::zeros();
    for i in 0..2 {
        let v = eig.eigenvectors.column(i);
        cov += v * v.transpose() * eig.eigenvalues[i].clamp(0.0, cap);
    }
    let cov = (cov + cov.transpose()) * 0.5;

    let t = ranges[ranges.len() - 1].t;
    Ok(RsuFix {
        t_emitted: t,
        t_available: t,
        position: [chosen.position.x, chosen.position.y],
        covariance: cov,
    })
}

struct GnSolution {
    position: Vector2<f64>,
    cost: f64,
    position_cov: Matrix2<f64>,
}

/// The whitened range problem over `(px, py, dtheta, log_scale)`.
struct RangeProblem<'a> {
    rel: &'a [Vector2<f64>],
    ranges: &'a [RangeSample],
    site: Vector2<f64>,
    sigma: f64,
    heading_prior_std: f64,
    log_scale_prior_std: f64,
}

impl RangeProblem<'_> {
    fn aligned_rel(&self, i: usize, dtheta: f64, log_scale: f64) -> Vector2<f64> {
        let (sin_t, cos_t) = dtheta.sin_cos();
        let scale = log_scale.exp();
        let r = self.rel[i];
        Vector2::new(cos_t * r.x - sin_t * r.y, sin_t * r.x + cos_t * r.y) * scale
    }

    /// Whitened residual vector: range misfits over sigma, then the two
    /// alignment priors.
    fn residuals(&self, x: &Vector4<f64>) -> Vec<f64> {
        let p = Vector2::new(x[0], x[1]);
        let mut out: Vec<f64> = (0..self.rel.len())
            .map(|i| {
                let pos_i = p + self.aligned_rel(i, x[2], x[3]);
                ((pos_i - self.site).norm().max(1e-9) - self.ranges[i].range) / self.sigma
            })
            .collect();
        out.push(x[2] / self.heading_prior_std);
        out.push(x[3] / self.log_scale_prior_std);
        out
    }

    fn cost(res: &[f64]) -> f64 {
        res.iter().map(|v| v * v).sum()
    }

    /// Gauss-Newton with backtracking; `None` when the iteration cap is
    /// exhausted without convergence.
    fn solve(&self, start: Vector2<f64>) -> Option<GnSolution> {
        let mut x = Vector4::new(start.x, start.y, 0.0, 0.0);
        let mut res = self.residuals(&x);
        let mut current_cost = Self::cost(&res);
        for _ in 0..MAX_GN_ITERATIONS {
            let mut normal = Matrix4::zeros();
            let mut gradient = Vector4::zeros();
            let p = Vector2::new(x[0], x[1]);
            for i in 0..self.rel.len() {
                let aligned = self.aligned_rel(i, x[2], x[3]);
                let d = p + aligned - self.site;
                let norm = d.norm().max(1e-9);
                let u = d / norm;
                // d(aligned)/d(theta) rotates the leg by 90 degrees;
                // d(aligned)/d(log s) is the leg itself.
                let dtheta_dir = Vector2::new(-aligned.y, aligned.x);
                let row = Vector4::new(
                    u.x / self.sigma,
                    u.y / self.sigma,
                    u.dot(&dtheta_dir) / self.sigma,
                    u.dot(&aligned) / self.sigma,
                );
                normal += row * row.transpose();
                gradient += row * res[i];
            }
            // Alignment priors.
            let mut prior_row = Vector4::zeros();
            prior_row[2] = 1.0 / self.heading_prior_std;
            normal += prior_row * prior_row.transpose();
            gradient += prior_row * res[self.rel.len()];
            let mut prior_row = Vector4::zeros();
            prior_row[3] = 1.0 / self.log_scale_prior_std;
            normal += prior_row * prior_row.transpose();
            gradient += prior_row * res[self.rel.len() + 1];

            // Tiny ridge keeps the solve defined when the anchors are
            // collinear with the solution (pure radial approach).
            let ridge = (normal.trace() * 1e-12).max(1e-15);
            let step = -(normal + Matrix4::identity() * ridge)
                .try_inverse()
                .expect("ridge keeps the normal matrix invertible")
                * gradient;
            // Backtracking line search guarantees descent.
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-6 {
                let candidate = x + step * alpha;
                let cand_res = self.residuals(&candidate);
                let cand_cost = Self::cost(&cand_res);
                if cand_cost <= current_cost {
                    x = candidate;
                    res = cand_res;
                    current_cost = cand_cost;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted || (step.norm() * alpha) < 1e-9 {
                let ridge = (normal.trace() * 1e-12).max(1e-15);
                let full_cov = (normal + Matrix4::identity() * ridge)
                    .try_inverse()
                    .expect("ridge keeps the normal matrix invertible");
                return Some(GnSolution {
                    position: Vector2::new(x[0], x[1]),
                    cost: current_cost,
                    position_cov: full_cov.fixed_view::<2, 2>(0, 0).into_owned(),
                });
            }
        }
        None
    }
}

/// Centroid and principal direction of the virtual-anchor constellation,
/// the axis the reflection ambiguity mirrors across.
fn anchor_baseline(anchors: &[Vector2<f64>]) -> (Vector2<f64>, Vector2<f64>) {
    let n = anchors.len() as f64;
    let centroid = anchors.iter().fold(Vector2::zeros(), |a, c| a + c) / n;
    let mut scatter = Matrix2::zeros();
    for c in anchors {
        let d = c - centroid;
        scatter += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let principal = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        eig.eigenvectors.column(0).into_owned()
    } else {
        eig.eigenvectors.column(1).into_owned()
    };
    (centroid, principal)
}

/// GPS-free location predictor: anchored on RSU fixes, advanced by the same
/// propagation as the EKF prediction step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsuPredictor {
    pub state: VehicleState,
    pub cov: CovarianceMatrix,
    /// Time of the last anchor (s).
    pub anchored_at: f64,
    /// Position covariance of the anchoring fix, kept for the detector's
    /// residual-uncertainty feature.
    pub anchor_cov: Matrix2<f64>,
}

impl RsuPredictor {
    /// Initialize from a fix; heading and speed come from the caller's own
    /// local state. A new anchor fully replaces the previous one.
    pub fn anchored(fix: &RsuFix, heading: f64, speed: f64, anchor: &AnchorConfig) -> Self {
        let mut cov = Matrix4::zeros();
        cov.fixed_view_mut::<2, 2>(0, 0).copy_from(&fix.covariance);
        cov[(2, 2)] = anchor.heading_var;
        cov[(3, 3)] = anchor.speed_var;
        Self {
            state: VehicleState::new(fix.position[0], fix.position[1], heading, speed),
            cov: CovarianceMatrix::symmetrized(cov),
            anchored_at: fix.t_available,
            anchor_cov: fix.covariance,
        }
    }

    /// Start the chain before any fix exists, from the vehicle's initial
    /// state estimate.
    pub fn seeded(state: VehicleState, position_var: f64, t: f64, anchor: &AnchorConfig) -> Self {
        let fix = RsuFix {
            t_emitted: t,
            t_available: t,
            position: [state.px, state.py],
            covariance: Matrix2::identity() * position_var,
        };
        Self::anchored(&fix, state.heading, state.speed, anchor)
    }

    /// Dead-reckon one IMU step; identical mathematics to the EKF predict.
    pub fn advance(&mut self, u: &ImuSample, cfg: &EkfConfig) -> Result<(), RsuError> {
        let (state, cov) = ekf_predict(&self.state, &self.cov, u, cfg)?;
        self.state = state;
        self.cov = cov;
        Ok(())
    }

    /// Trace of the 2x2 position block, the scalar drift indicator.
    pub fn position_uncertainty(&self) -> f64 {
        self.cov.position_block().trace()
    }
}

/// Byte-level envelope around transmitted fixes. Identity by default; real
/// deployments plug ciphers in here.
pub trait EnvelopeCodec: Send + Sync {
    fn encode(&self, plain: &[u8]) -> Vec<u8>;
    fn decode(&self, wire: &[u8]) -> Result<Vec<u8>, RsuError>;
}

/// Pass-through codec.
#[derive(Debug, Default)]
pub struct IdentityCodec;

impl EnvelopeCodec for IdentityCodec {
    fn encode(&self, plain: &[u8]) -> Vec<u8> {
        plain.to_vec()
    }

    fn decode(&self, wire: &[u8]) -> Result<Vec<u8>, RsuError> {
        Ok(wire.to_vec())
    }
}

/// Infrastructure-to-vehicle channel: serialize, encode, decode, and stamp
/// the delivery time with the configured latency.
pub struct SecureChannel {
    latency: f64,
    codec: Box<dyn EnvelopeCodec>,
}

impl SecureChannel {
    pub fn new(latency: f64) -> Self {
        Self::with_codec(latency, Box::new(IdentityCodec))
    }

    pub fn with_codec(latency: f64, codec: Box<dyn EnvelopeCodec>) -> Self {
        Self { latency, codec }
    }

    pub fn latency(&self) -> f64 {
        self.latency
    }

    pub fn transmit(&self, fix: &RsuFix) -> Result<RsuFix, RsuError> {
        let plain = serde_json::to_vec(fix).map_err(|e| RsuError::Envelope(e.to_string()))?;
        let wire = self.codec.encode(&plain);
        let decoded = self.codec.decode(&wire)?;
        let mut delivered: RsuFix =
            serde_json::from_slice(&decoded).map_err(|e| RsuError::Envelope(e.to_string()))?;
        delivered.t_available = delivered.t_emitted + self.latency;
        Ok(delivered)
    }
}

/// Vehicle-side collector: the rolling window of ranges from the site
/// currently in view, plus the odometry needed to localize over it.
#[derive(Debug, Clone)]
pub struct RangeWindow {
    capacity: usize,
    ranges: VecDeque<RangeSample>,
    odometry: VecDeque<ImuSample>,
}

impl RangeWindow {
    /// `window_len` is the sequence length `o`; localization consumes
    /// `o + 1` samples.
    pub fn new(window_len: usize) -> Self {
        Self {
            capacity: window_len + 1,
            ranges: VecDeque::new(),
            odometry: VecDeque::new(),
        }
    }

    pub fn push_odometry(&mut self, u: ImuSample) {
        self.odometry.push_back(u);
        let horizon = self
            .ranges
            .front()
            .map(|r| r.t)
            .unwrap_or(u.t - self.capacity as f64);
        while self.odometry.front().is_some_and(|o| o.t < horizon - 1e-6) {
            self.odometry.pop_front();
        }
    }

    pub fn push_range(&mut self, sample: RangeSample) {
        if self.ranges.front().is_some_and(|r| r.rsu_id != sample.rsu_id) {
            self.ranges.clear();
        }
        self.ranges.push_back(sample);
        while self.ranges.len() > self.capacity {
            self.ranges.pop_front();
        }
    }

    pub fn clear_ranges(&mut self) {
        self.ranges.clear();
    }

    pub fn is_full(&self) -> bool {
        self.ranges.len() == self.capacity
    }

    pub fn ranges(&self) -> Vec<RangeSample> {
        self.ranges.iter().copied().collect()
    }

    pub fn odometry(&self) -> Vec<ImuSample> {
        self.odometry.iter().copied().collect()
    }
}
