//! Batch evaluation: trajectory supply, the per-trip event loop that wires
//! sensors, attacks, RSU localization and the defense pipeline together,
//! forest training on benign runs, batch/sweep execution, CUSUM tuning,
//! and report emission.
//!
//! Per trip the batch runs three pipelines over identical sensor streams
//! and the identical attack: the infrastructure-defended run (gated by the
//! configured detector, isolation-forest by default) and two conventional
//! baselines (chi-square and CUSUM) that detect and isolate but have no
//! infrastructure data to correct with. Each detector's metrics come from
//! its own run, which is what makes the RMSE columns comparable.

use crate::attack::{random_schedule, AttackKind, AttackMenu, AttackRunner, AttackSchedule};
use crate::detector::{DetectorId, FeatureVector, FeatureWindow, ForestParams, IsolationForest, WindowMode};
use crate::estimator::{CovarianceMatrix, VehicleState};
use crate::metrics::{compute_rmse, confusion_counts, TripMetrics};
use crate::pipeline::{Event, EpochRecord, Pipeline, PipelineConfig, PipelineError};
use crate::rsu::{localize_from_ranges, place_rsus, sample_range, AnchorConfig, RangeWindow, RsuError, RsuFix, RsuSite, SecureChannel};
use crate::scenario::{ScenarioConfig, ScenarioError};
use crate::sensors::{substream_rng, synthesize_gps, synthesize_imu, synthetic_trajectory, SensorNoiseConfig, Substream, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sensor(#[from] crate::sensors::SensorError),
    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Rsu(#[from] RsuError),
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

/// SplitMix64-style mixing for derived seeds, so trips get independent yet
/// reproducible streams regardless of execution order.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TRAJECTORY: u64 = 1;
const TAG_TRIP: u64 = 2;
const TAG_TRAINING: u64 = 3;
const TAG_FOREST: u64 = 4;

/// A trajectory plus the name used in reports and file names.
#[derive(Debug, Clone)]
pub struct NamedTrajectory {
    pub name: String,
    pub trajectory: Trajectory,
}

/// Load explicit trajectory files and generate the synthetic fleet.
pub fn resolve_trajectories(cfg: &ScenarioConfig) -> Result<Vec<NamedTrajectory>, HarnessError> {
    let mut out = Vec::new();
    for path in &cfg.trajectories.paths {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "trajectory".into());
        out.push(NamedTrajectory {
            name,
            trajectory: Trajectory::from_csv(path, cfg.sensors.dt)?,
        });
    }
    if let Some(synth) = &cfg.trajectories.synthetic {
        for i in 0..synth.count {
            let seed = mix_seed(cfg.run.seed, TAG_TRAJECTORY, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let duration = rng.gen_range(synth.duration_min..=synth.duration_max);
            out.push(NamedTrajectory {
                name: format!("synthetic_{i:02}"),
                trajectory: synthetic_trajectory(seed, duration, cfg.sensors.dt),
            });
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Other("no trajectories configured".into()));
    }
    Ok(out)
}

/// Build the attack schedule for one trip: the configured fixed window, or
/// a random one drawn from the trip's schedule substream. Parameters come
/// from the scenario and are oriented laterally to the road at onset.
pub fn build_schedule(cfg: &ScenarioConfig, traj: &Trajectory, trip_seed: u64) -> Result<AttackSchedule, HarnessError> {
    let t0 = traj.start_time();
    let (start, end) = match cfg.attack.window {
        Some([a, b]) => (t0 + a, t0 + b),
        None => {
            if matches!(cfg.attack.kind, AttackMenu::None) {
                return Ok(AttackSchedule::none());
            }
            let mut rng = substream_rng(trip_seed, Substream::Schedule);
            let drawn = random_schedule(&mut rng, cfg.attack.kind, traj.duration())?;
            (t0 + drawn.start, t0 + drawn.end)
        }
    };
    let kind = match cfg.attack.kind {
        AttackMenu::None => return Ok(AttackSchedule::none()),
        AttackMenu::ConstantBias => AttackKind::ConstantBias {
            bias: [cfg.attack.bias, 0.0],
        },
        AttackMenu::Stealthy => AttackKind::Stealthy {
            m: cfg.attack.stealthy_m,
            n: cfg.attack.stealthy_n,
            direction: [1.0, 0.0],
        },
    };
    let schedule = AttackSchedule { kind, start, end }.with_lateral_geometry(traj.heading_at(start));
    schedule.validate()?;
    Ok(schedule)
}

fn pipeline_config(cfg: &ScenarioConfig, gate: Option<DetectorId>, infrastructure: bool) -> Result<PipelineConfig, HarnessError> {
    Ok(PipelineConfig {
        ekf: cfg.ekf_config().map_err(ScenarioError::Estimator)?,
        anchor: AnchorConfig {
            heading_var: cfg.rsu.anchor_heading_var,
            speed_var: cfg.rsu.anchor_speed_var,
        },
        gate,
        infrastructure,
        reinstate_after: cfg.detector.reinstate_after,
        chi2_confidence: cfg.detector.chi2_confidence,
        cusum_drift: cfg.detector.cusum_drift,
        cusum_threshold: cfg.detector.cusum_threshold,
        initial_position_var: cfg.ekf.init_pos_var,
        window_mode: cfg.detector.window_mode,
    })
}

fn rsu_sites(cfg: &ScenarioConfig, traj: &Trajectory) -> Vec<RsuSite> {
    match &cfg.rsu.sites {
        Some(coords) => coords
            .iter()
            .enumerate()
            .map(|(id, c)| RsuSite {
                id,
                coord: *c,
                service_radius: cfg.rsu.service_radius,
                broadcast_rate: cfg.rsu.broadcast_rate,
            })
            .collect(),
        None => place_rsus(traj, cfg.rsu.spacing, cfg.rsu.service_radius, cfg.rsu.broadcast_rate),
    }
}

/// Everything one pipeline run produced.
pub struct TripRun {
    pub epoch_log: Vec<EpochRecord>,
    pub rmse: f64,
}

/// Drive one pipeline over one trip. Sensor streams and the attack depend
/// only on `trip_seed`, so runs with different gates see identical inputs.
/// The optional inspector is called after every event for invariant checks.
#[allow(clippy::too_many_arguments)]
pub fn run_trip(
    traj: &Trajectory,
    cfg: &ScenarioConfig,
    schedule: &AttackSchedule,
    trip_seed: u64,
    gate: Option<DetectorId>,
    infrastructure: bool,
    forest: Option<Arc<IsolationForest>>,
    mut inspector: Option<&mut dyn FnMut(&Pipeline, &Event)>,
) -> Result<TripRun, HarnessError> {
    let noise = SensorNoiseConfig {
        gps_sigma: cfg.sensors.gps_sigma,
        imu_accel_sigma: cfg.sensors.imu_accel_sigma,
        imu_gyro_sigma: cfg.sensors.imu_gyro_sigma,
        seed: trip_seed,
    };
    let imu = synthesize_imu(traj, &noise);
    let gps = synthesize_gps(traj, &noise);
    let mut attack = AttackRunner::new(*schedule);

    let p0 = traj.points()[0];
    let initial = VehicleState::new(p0.x, p0.y, p0.heading, p0.speed);
    let initial_cov = CovarianceMatrix::from_diagonal(cfg.initial_cov_diag());
    let pcfg = pipeline_config(cfg, gate, infrastructure)?;
    let mut pipeline = Pipeline::new(pcfg, forest, initial, initial_cov, p0.t)?;

    let sites = if infrastructure { rsu_sites(cfg, traj) } else { Vec::new() };
    let mut range_rng = substream_rng(trip_seed, Substream::RsuRange);
    let mut range_window = RangeWindow::new(cfg.rsu.window_len);
    let channel = SecureChannel::new(cfg.rsu.channel_latency);
    let broadcast_every = ((1.0 / cfg.sensors.dt) / cfg.rsu.broadcast_rate).round().max(1.0) as usize;
    let fix_period = 1.0 / cfg.rsu.fix_rate;
    let mut last_fix_attempt = f64::NEG_INFINITY;
    let mut pending: Vec<RsuFix> = Vec::new();

    let per_gps = (1.0 / cfg.sensors.dt).round() as usize;
    let mut gps_idx = 0usize;

    let dispatch = |pipeline: &mut Pipeline, event: Event, inspector: &mut Option<&mut dyn FnMut(&Pipeline, &Event)>| -> Result<(), PipelineError> {
        pipeline.step(&event)?;
        if let Some(cb) = inspector {
            cb(pipeline, &event);
        }
        Ok(())
    };

    for (k, u) in imu.iter().enumerate() {
        let tick = k + 1; // trajectory point the sample advances to
        let t = u.t;
        let truth = traj.points()[tick];

        // Fixes that became visible strictly before this tick.
        pending.sort_by(|a, b| a.t_available.partial_cmp(&b.t_available).unwrap());
        while pending.first().is_some_and(|f| f.t_available < t - 1e-9) {
            let fix = pending.remove(0);
            dispatch(&mut pipeline, Event::Rsu(fix), &mut inspector)?;
        }

        dispatch(&mut pipeline, Event::Imu(*u), &mut inspector)?;

        if infrastructure {
            range_window.push_odometry(*u);
            if tick % broadcast_every == 0 {
                let pos = nalgebra::Vector2::new(truth.x, truth.y);
                match sites.iter().find(|s| s.in_range(&pos)) {
                    Some(site) => {
                        if let Some(sample) = sample_range(t, &pos, site, cfg.rsu.sigma_range, &mut range_rng) {
                            range_window.push_range(sample);
                        }
                    }
                    None => range_window.clear_ranges(),
                }
            }
            if range_window.is_full() && t - last_fix_attempt >= fix_period - 1e-9 {
                last_fix_attempt = t;
                let ranges = range_window.ranges();
                let site = &sites[ranges[0].rsu_id];
                let odometry = range_window.odometry();
                // The prior comes from the GPS-free predictor chain, so a
                // spoofed filter cannot steer the mirror disambiguation.
                // Its heading quality is the predictor's own bookkeeping:
                // the filter's value at the last anchor plus gyro growth.
                let prior = pipeline.predictor().state;
                let heading_std = pipeline.predictor().cov.as_matrix()[(2, 2)].max(1e-6).sqrt();
                match localize_from_ranges(
                    &ranges,
                    site,
                    &odometry,
                    &prior,
                    heading_std,
                    cfg.rsu.sigma_range,
                    cfg.sensors.dt,
                ) {
                    Ok(fix) => {
                        // Broadcast only well-conditioned solutions; on a
                        // radial approach the cross-range direction is
                        // unobservable from one site and the covariance
                        // says so. Consumers dead-reckon through the gap,
                        // which is why fixes cluster around site passes.
                        if fix.covariance.trace() <= cfg.rsu.fix_quality_max {
                            let delivered = channel.transmit(&fix)?;
                            pending.push(delivered);
                        }
                    }
                    Err(RsuError::NoConvergence { .. }) => {
                        // No fix this period; consumers fall back to the
                        // predictor.
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }

        // Fixes landing exactly on this tick follow the IMU update.
        pending.sort_by(|a, b| a.t_available.partial_cmp(&b.t_available).unwrap());
        while pending.first().is_some_and(|f| f.t_available <= t + 1e-9) {
            let fix = pending.remove(0);
            dispatch(&mut pipeline, Event::Rsu(fix), &mut inspector)?;
        }

        if tick % per_gps == 0 && gps_idx < gps.len() {
            let fix = attack.apply(&gps[gps_idx]);
            gps_idx += 1;
            dispatch(
                &mut pipeline,
                Event::Gps {
                    fix,
                    truth: [truth.x, truth.y],
                },
                &mut inspector,
            )?;
        }
    }

    let estimates: Vec<[f64; 2]> = pipeline.track().iter().map(|(_, p)| *p).collect();
    let truth: Vec<[f64; 2]> = traj.points()[1..].iter().map(|p| [p.x, p.y]).collect();
    let rmse = compute_rmse(&estimates, &truth)?;
    Ok(TripRun {
        epoch_log: pipeline.epoch_log().to_vec(),
        rmse,
    })
}

/// Rebuild the forest's window inputs from a benign epoch log, matching
/// the scoring-time combination rule.
pub fn windows_from_log(log: &[EpochRecord], width: usize, mode: WindowMode) -> Vec<Vec<f64>> {
    match mode {
        WindowMode::Concat => {
            let mut window = FeatureWindow::new(width);
            log.iter()
                .map(|r| {
                    window.push(FeatureVector {
                        t: r.t,
                        nees: r.nees,
                        r_rsu: r.r_rsu,
                        s_rsu: r.s_rsu,
                    });
                    window.concatenated().expect("pushed above")
                })
                .collect()
        }
        WindowMode::Vote => log
            .iter()
            .map(|r| {
                FeatureVector {
                    t: r.t,
                    nees: r.nees,
                    r_rsu: r.r_rsu,
                    s_rsu: r.s_rsu,
                }
                .as_forest_input()
                .to_vec()
            })
            .collect(),
    }
}

/// Train the detector on benign (attack-free) defended runs over the
/// configured trajectories. Training trips use a seed stream disjoint from
/// evaluation trips.
pub fn train_forest(cfg: &ScenarioConfig) -> Result<IsolationForest, HarnessError> {
    let trajectories = resolve_trajectories(cfg)?;
    let mut samples = Vec::new();
    for (idx, named) in trajectories.iter().enumerate() {
        let trip_seed = mix_seed(cfg.run.seed, TAG_TRAINING, idx as u64);
        let run = run_trip(
            &named.trajectory,
            cfg,
            &AttackSchedule::none(),
            trip_seed,
            None,
            true,
            None,
            None,
        )?;
        samples.extend(windows_from_log(
            &run.epoch_log,
            cfg.detector.window,
            cfg.detector.window_mode,
        ));
    }
    let params = ForestParams {
        trees: cfg.detector.trees,
        subsample: cfg.detector.subsample,
        alpha: cfg.detector.alpha,
        window: cfg.detector.window,
    };
    Ok(IsolationForest::train(&samples, &params, mix_seed(cfg.run.seed, TAG_FOREST, 0))?)
}

/// One trip's result row in the batch report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripRow {
    pub trip: String,
    pub trajectory: String,
    pub repetition: usize,
    pub seed: u64,
    pub schedule: AttackSchedule,
    pub metrics: BTreeMap<String, TripMetrics>,
}

/// Aggregated batch result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchReport {
    pub seed: u64,
    pub repetitions: usize,
    pub trajectories: usize,
    pub trips: Vec<TripRow>,
    /// Unweighted per-detector means over successful trips.
    pub means: BTreeMap<String, TripMetrics>,
    pub failures: Vec<String>,
}

/// Batch output: the report plus the defended run's epoch log per trip.
pub struct BatchOutput {
    pub report: BatchReport,
    pub epoch_logs: Vec<(String, Vec<EpochRecord>)>,
}

fn mean_metrics(rows: &[&TripMetrics]) -> TripMetrics {
    let n = rows.len().max(1) as f64;
    TripMetrics {
        f1: rows.iter().map(|m| m.f1).sum::<f64>() / n,
        precision: rows.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: rows.iter().map(|m| m.recall).sum::<f64>() / n,
        detection_latency: rows.iter().map(|m| m.detection_latency).sum::<f64>() / n,
        rmse: rows.iter().map(|m| m.rmse).sum::<f64>() / n,
    }
}

fn trip_metrics_from_run(run: &TripRun, id: DetectorId) -> TripMetrics {
    let confusion = confusion_counts(
        run.epoch_log
            .iter()
            .map(|r| (r.verdict_for(id) > 0, r.spoofed)),
    );
    TripMetrics::from_confusion(&confusion, run.rmse)
}

/// Run one full trip set: per trajectory x repetition, a defended run plus
/// the two conventional baselines over identical streams.
pub fn run_batch(cfg: &ScenarioConfig, forest: &Arc<IsolationForest>) -> Result<BatchOutput, HarnessError> {
    let trajectories = Arc::new(resolve_trajectories(cfg)?);
    let mut specs = Vec::new();
    for traj_idx in 0..trajectories.len() {
        for rep in 0..cfg.run.repetitions.max(1) {
            specs.push((traj_idx, rep));
        }
    }

    let work = |&(traj_idx, rep): &(usize, usize)| -> Result<(TripRow, Vec<EpochRecord>), (String, HarnessError)> {
        let named = &trajectories[traj_idx];
        let trip = format!("{}_r{rep}", named.name);
        let fail = |e: HarnessError| (trip.clone(), e);
        let trip_seed = mix_seed(cfg.run.seed, TAG_TRIP, (traj_idx as u64) << 16 | rep as u64);
        let schedule = build_schedule(cfg, &named.trajectory, trip_seed).map_err(fail)?;

        let defended_gate = cfg.detector.selected;
        let defended = run_trip(
            &named.trajectory,
            cfg,
            &schedule,
            trip_seed,
            Some(defended_gate),
            true,
            Some(Arc::clone(forest)),
            None,
        )
        .map_err(|e| (trip.clone(), e))?;

        let mut metrics = BTreeMap::new();
        metrics.insert(
            defended_gate.label().to_string(),
            trip_metrics_from_run(&defended, defended_gate),
        );
        for id in DetectorId::ALL {
            if id == defended_gate {
                continue;
            }
            let baseline = run_trip(
                &named.trajectory,
                cfg,
                &schedule,
                trip_seed,
                Some(id),
                false,
                None,
                None,
            )
            .map_err(|e| (trip.clone(), e))?;
            metrics.insert(id.label().to_string(), trip_metrics_from_run(&baseline, id));
        }

        Ok((
            TripRow {
                trip,
                trajectory: named.name.clone(),
                repetition: rep,
                seed: trip_seed,
                schedule,
                metrics,
            },
            defended.epoch_log,
        ))
    };

    let results: Vec<Result<(TripRow, Vec<EpochRecord>), (String, HarnessError)>> = if cfg.run.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build()
            .map_err(|e| HarnessError::Other(e.to_string()))?;
        pool.install(|| specs.par_iter().map(work).collect())
    } else {
        specs.par_iter().map(work).collect()
    };

    let mut trips = Vec::new();
    let mut epoch_logs = Vec::new();
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok((row, log)) => {
                epoch_logs.push((row.trip.clone(), log));
                trips.push(row);
            }
            Err((trip, err)) => failures.push(format!("{trip}: {err}")),
        }
    }

    let mut means = BTreeMap::new();
    for id in DetectorId::ALL {
        let rows: Vec<&TripMetrics> = trips.iter().filter_map(|t| t.metrics.get(id.label())).collect();
        if !rows.is_empty() {
            means.insert(id.label().to_string(), mean_metrics(&rows));
        }
    }

    Ok(BatchOutput {
        report: BatchReport {
            seed: cfg.run.seed,
            repetitions: cfg.run.repetitions,
            trajectories: trajectories.len(),
            trips,
            means,
            failures,
        },
        epoch_logs,
    })
}

/// Sensitivity-sweep axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// RSU spacing D_RSU (m).
    DRsu,
    /// Forest contamination.
    Alpha,
    /// Range noise sigma_RSU (m).
    SigmaRsu,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d_rsu" | "drsu" | "spacing" => Some(Self::DRsu),
            "alpha" | "contamination" => Some(Self::Alpha),
            "sigma_rsu" | "sigmarsu" | "sigma" => Some(Self::SigmaRsu),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::DRsu => "d_rsu",
            Self::Alpha => "alpha",
            Self::SigmaRsu => "sigma_rsu",
        }
    }

    pub fn apply(&self, cfg: &mut ScenarioConfig, value: f64) {
        match self {
            Self::DRsu => cfg.rsu.spacing = value,
            Self::Alpha => cfg.detector.alpha = value,
            Self::SigmaRsu => cfg.rsu.sigma_range = value,
        }
    }
}

/// Long-format sweep row: one (axis value, detector) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub detector: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub detection_latency: f64,
    pub rmse: f64,
}

/// Re-train and re-evaluate per axis value with shared base seeds.
pub fn run_sweep(cfg: &ScenarioConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Other("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut point = cfg.clone();
        axis.apply(&mut point, value);
        point.validate()?;
        let forest = Arc::new(train_forest(&point)?);
        let output = run_batch(&point, &forest)?;
        if !output.report.failures.is_empty() {
            return Err(HarnessError::Other(format!(
                "sweep point {} = {value} had {} failed trips",
                axis.label(),
                output.report.failures.len()
            )));
        }
        for (detector, m) in &output.report.means {
            rows.push(SweepRow {
                axis: axis.label().to_string(),
                value,
                detector: detector.clone(),
                f1: m.f1,
                precision: m.precision,
                recall: m.recall,
                detection_latency: m.detection_latency,
                rmse: m.rmse,
            });
        }
    }
    Ok(rows)
}

/// Grid-search the CUSUM parameters on baseline runs, maximizing mean F1.
pub const CUSUM_DRIFT_GRID: [f64; 6] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
pub const CUSUM_THRESHOLD_GRID: [f64; 5] = [2.0, 5.0, 10.0, 20.0, 40.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CusumTuning {
    pub drift: f64,
    pub threshold: f64,
    pub f1: f64,
    pub grid: Vec<(f64, f64, f64)>,
}

pub fn tune_cusum(cfg: &ScenarioConfig) -> Result<CusumTuning, HarnessError> {
    let trajectories = resolve_trajectories(cfg)?;
    let mut specs = Vec::new();
    for traj_idx in 0..trajectories.len() {
        for rep in 0..cfg.run.repetitions.max(1) {
            specs.push((traj_idx, rep));
        }
    }
    let mut grid = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    for drift in CUSUM_DRIFT_GRID {
        for threshold in CUSUM_THRESHOLD_GRID {
            let mut point = cfg.clone();
            point.detector.cusum_drift = drift;
            point.detector.cusum_threshold = threshold;
            let f1s: Vec<f64> = specs
                .par_iter()
                .map(|&(traj_idx, rep)| -> Result<f64, HarnessError> {
                    let named = &trajectories[traj_idx];
                    let trip_seed = mix_seed(point.run.seed, TAG_TRIP, (traj_idx as u64) << 16 | rep as u64);
                    let schedule = build_schedule(&point, &named.trajectory, trip_seed)?;
                    let run = run_trip(
                        &named.trajectory,
                        &point,
                        &schedule,
                        trip_seed,
                        Some(DetectorId::Cusum),
                        false,
                        None,
                        None,
                    )?;
                    Ok(trip_metrics_from_run(&run, DetectorId::Cusum).f1)
                })
                .collect::<Result<Vec<f64>, HarnessError>>()?;
            let mean = f1s.iter().sum::<f64>() / f1s.len().max(1) as f64;
            grid.push((drift, threshold, mean));
            if best.map(|(_, _, b)| mean > b).unwrap_or(true) {
                best = Some((drift, threshold, mean));
            }
        }
    }
    let (drift, threshold, f1) = best.expect("grid is non-empty");
    Ok(CusumTuning {
        drift,
        threshold,
        f1,
        grid,
    })
}

pub fn write_report_json(path: &Path, report: &BatchReport) -> Result<(), HarnessError> {
    let json = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| HarnessError::Io(format!("write {}: {e}", path.display())))
}

/// Aligned text table in the spirit of the published comparisons: metrics
/// as rows, detectors as columns.
pub fn render_report_txt(report: &BatchReport) -> String {
    let detectors: Vec<&String> = report.means.keys().collect();
    let mut out = String::new();
    out.push_str(&format!(
        "batch: {} trajectories x {} repetitions, seed {}\n",
        report.trajectories, report.repetitions, report.seed
    ));
    out.push_str(&format!("trips: {} ok, {} failed\n\n", report.trips.len(), report.failures.len()));
    out.push_str(&format!("{:<18}", "metric"));
    for d in &detectors {
        out.push_str(&format!("{:>12}", d));
    }
    out.push('\n');
    let rows: [(&str, fn(&TripMetrics) -> f64); 5] = [
        ("f1", |m| m.f1),
        ("precision", |m| m.precision),
        ("recall", |m| m.recall),
        ("latency_epochs", |m| m.detection_latency),
        ("rmse_m", |m| m.rmse),
    ];
    for (name, get) in rows {
        out.push_str(&format!("{name:<18}"));
        for d in &detectors {
            out.push_str(&format!("{:>12.3}", get(&report.means[*d])));
        }
        out.push('\n');
    }
    if !report.failures.is_empty() {
        out.push_str("\nfailures:\n");
        for f in &report.failures {
            out.push_str(&format!("  {f}\n"));
        }
    }
    out
}

pub fn write_report_txt(path: &Path, report: &BatchReport) -> Result<(), HarnessError> {
    std::fs::write(path, render_report_txt(report)).map_err(|e| HarnessError::Io(format!("write {}: {e}", path.display())))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let mut out = String::from("axis,value,detector,f1,precision,recall,detection_latency,rmse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis, r.value, r.detector, r.f1, r.precision, r.recall, r.detection_latency, r.rmse
        ));
    }
    std::fs::write(path, out).map_err(|e| HarnessError::Io(format!("write {}: {e}", path.display())))
}

/// Write the full evaluation artifact set under `dir`: report.json,
/// report.txt and the per-trip epoch CSVs. Returns the paths written.
pub fn write_batch_artifacts(dir: &Path, output: &BatchOutput) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir.join("epochs")).map_err(|e| HarnessError::Io(e.to_string()))?;
    let mut written = Vec::new();
    let json_path = dir.join("report.json");
    write_report_json(&json_path, &output.report)?;
    written.push(json_path);
    let txt_path = dir.join("report.txt");
    write_report_txt(&txt_path, &output.report)?;
    written.push(txt_path);
    for (trip, log) in &output.epoch_logs {
        let path = dir.join("epochs").join(format!("{trip}.csv"));
        crate::pipeline::write_epoch_csv(&path, log)?;
        written.push(path);
    }
    Ok(written)
}

/// Emit a `writeln!`-based progress line to stderr; the harness keeps
/// stdout for machine-readable output.
pub fn progress(msg: &str) {
    let _ = writeln!(std::io::stderr(), "{msg}");
}
