//! Simulation library for infrastructure-assisted GPS-spoofing defense on
//! road vehicles: EKF localization over replayed trajectories, constant-bias
//! and stealthy attack models, roadside-unit ranging with a GPS-free
//! location predictor, isolation-forest detection with chi-square and CUSUM
//! baselines, and a seeded batch-evaluation harness with sensitivity sweeps.
//!
//! Start from the `examples/` directory: each example exercises one major
//! capability end to end. The `spoofguard` binary wraps the harness in a
//! small CLI (`simulate`, `train`, `evaluate`, `sweep`, `tune-cusum`).

pub mod attack;
pub mod detector;
pub mod estimator;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod rsu;
pub mod scenario;
pub mod sensors;
