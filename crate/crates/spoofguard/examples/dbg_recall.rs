use spoofguard::detector::DetectorId;
use spoofguard::harness::{build_schedule, mix_seed, resolve_trajectories, run_trip, train_forest};
use spoofguard::pipeline::Event;
use spoofguard::scenario::ScenarioConfig;
use std::sync::Arc;

fn main() {
    let cfg = ScenarioConfig::default();
    let forest = Arc::new(train_forest(&cfg).unwrap());
    let trajs = resolve_trajectories(&cfg).unwrap();
    let mut buckets = vec![(0usize, 0usize); 6];
    let mut onset_flagged = 0usize;
    let mut onsets = 0usize;
    let mut followed = 0usize;
    for (ti, named) in trajs.iter().enumerate() {
        for rep in 0..3u64 {
            let seed = mix_seed(cfg.run.seed, 2, (ti as u64) << 16 | rep);
            let sched = build_schedule(&cfg, &named.trajectory, seed).unwrap();
            let mut last_anchor = named.trajectory.start_time();
            let mut stale_at: Vec<f64> = Vec::new();
            let run = {
                let mut inspector = |_p: &spoofguard::pipeline::Pipeline, e: &Event| {
                    if let Event::Rsu(f) = e {
                        last_anchor = f.t_available;
                    }
                    if let Event::Gps { fix, .. } = e {
                        stale_at.push(fix.t - last_anchor);
                    }
                };
                run_trip(&named.trajectory, &cfg, &sched, seed, Some(DetectorId::IForest), true, Some(forest.clone()), Some(&mut inspector)).unwrap()
            };
            let mut first_spoof = true;
            for r in run.epoch_log.iter() {
                if r.spoofed && first_spoof {
                    onsets += 1;
                    if r.verdict_iforest > 0 {
                        onset_flagged += 1;
                    }
                    first_spoof = false;
                }
            }
            if let Some(last_sp) = run.epoch_log.iter().filter(|r| r.spoofed).last() {
                let err = ((last_sp.est_x - last_sp.true_x).powi(2) + (last_sp.est_y - last_sp.true_y).powi(2)).sqrt();
                if err > 2.5 && !last_sp.isolated {
                    followed += 1;
                }
            }
            for (r, stale) in run.epoch_log.iter().zip(&stale_at) {
                if r.spoofed {
                    let b = ((stale / 20.0) as usize).min(5);
                    buckets[b].1 += 1;
                    if r.verdict_iforest > 0 {
                        buckets[b].0 += 1;
                    }
                }
            }
        }
    }
    println!("onset flagged: {onset_flagged}/{onsets}; attacks silently followed to the end: {followed}/{onsets}");
    for (i, (f, t)) in buckets.iter().enumerate() {
        if *t > 0 {
            println!("stale {:>3}-{:>3}s: recall {:.2} ({}/{})", i * 20, (i + 1) * 20, *f as f64 / *t as f64, f, t);
        }
    }
}
