use spoofguard::detector::DetectorId;
use spoofguard::harness::{build_schedule, mix_seed, resolve_trajectories, run_trip, train_forest};
use spoofguard::scenario::ScenarioConfig;
use std::sync::Arc;

fn main() {
    let cfg = ScenarioConfig::default();
    let forest = Arc::new(train_forest(&cfg).unwrap());
    eprintln!("threshold {:.4}", forest.threshold());
    let trajs = resolve_trajectories(&cfg).unwrap();
    // pick trip 3 rep 0
    let named = &trajs[3];
    let seed = mix_seed(cfg.run.seed, 2, (3u64) << 16);
    let sched = build_schedule(&cfg, &named.trajectory, seed).unwrap();
    eprintln!("schedule: {:?}", sched);
    let run = run_trip(&named.trajectory, &cfg, &sched, seed, Some(DetectorId::IForest), true, Some(forest.clone()), None).unwrap();
    for r in &run.epoch_log {
        let est_err = ((r.est_x - r.true_x).powi(2) + (r.est_y - r.true_y).powi(2)).sqrt();
        let mark = if r.spoofed { "S" } else { " " };
        if r.t > sched.start - 8.0 && r.t < sched.end + 12.0 {
            println!("t={:5.0} {mark} if={:+} chi2={:+} iso={} nees={:8.2} r_rsu={:6.2} s_rsu={:9.1} score={:.3} est_err={:6.2}",
                r.t, r.verdict_iforest, r.verdict_chi2, r.isolated as u8, r.nees, r.r_rsu, r.s_rsu, r.score_iforest, est_err);
        }
    }
}
