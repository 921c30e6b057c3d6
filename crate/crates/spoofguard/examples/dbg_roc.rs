use spoofguard::detector::DetectorId;
use spoofguard::harness::{build_schedule, mix_seed, resolve_trajectories, run_trip, train_forest, windows_from_log};
use spoofguard::scenario::ScenarioConfig;
use std::sync::Arc;

fn main() {
    let cfg = ScenarioConfig::default();
    let forest = Arc::new(train_forest(&cfg).unwrap());
    let trajs = resolve_trajectories(&cfg).unwrap();
    let mut benign_scores = Vec::new();
    let mut spoof_scores = Vec::new();
    let mut benign_r = Vec::new();
    let mut spoof_r = Vec::new();
    for (ti, named) in trajs.iter().enumerate() {
        for rep in 0..2u64 {
            let seed = mix_seed(cfg.run.seed, 2, (ti as u64) << 16 | rep);
            let sched = build_schedule(&cfg, &named.trajectory, seed).unwrap();
            let run = run_trip(&named.trajectory, &cfg, &sched, seed, Some(DetectorId::IForest), true, Some(forest.clone()), None).unwrap();
            let windows = windows_from_log(&run.epoch_log, 3, cfg.detector.window_mode);
            for (r, w) in run.epoch_log.iter().zip(&windows) {
                let score = forest.anomaly_score(w).unwrap();
                if r.spoofed {
                    spoof_scores.push(score);
                    spoof_r.push(r.r_rsu);
                } else {
                    benign_scores.push(score);
                    benign_r.push(r.r_rsu);
                }
            }
        }
    }
    let tpr_at = |b: &mut Vec<f64>, s: &Vec<f64>, fpr: f64| -> (f64, f64) {
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        let thr = b[((b.len() - 1) as f64 * (1.0 - fpr)) as usize];
        (thr, s.iter().filter(|v| **v > thr).count() as f64 / s.len() as f64)
    };
    let (thr, tpr) = tpr_at(&mut benign_scores.clone(), &spoof_scores, 0.2);
    println!("forest: TPR@FPR0.2 = {tpr:.3} (thr {thr:.3}, trained thr {:.3})", forest.threshold());
    let (thr, tpr) = tpr_at(&mut benign_r.clone(), &spoof_r, 0.2);
    println!("r_rsu oracle: TPR@FPR0.2 = {tpr:.3} (thr {thr:.2} m)");
    let med = |v: &mut Vec<f64>| { v.sort_by(|a, c| a.partial_cmp(c).unwrap()); v[v.len()/2] };
    println!("r_rsu benign p50 {:.2} spoofed p50 {:.2}; counts {} / {}",
        med(&mut benign_r.clone()), med(&mut spoof_r.clone()), benign_r.len(), spoof_r.len());
}
