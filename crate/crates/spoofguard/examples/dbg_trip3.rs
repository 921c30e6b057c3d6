use spoofguard::detector::DetectorId;
use spoofguard::harness::{build_schedule, mix_seed, resolve_trajectories, run_trip, train_forest};
use spoofguard::pipeline::Event;
use spoofguard::scenario::ScenarioConfig;
use std::sync::Arc;

fn main() {
    let cfg = ScenarioConfig::default();
    let forest = Arc::new(train_forest(&cfg).unwrap());
    let trajs = resolve_trajectories(&cfg).unwrap();
    let named = &trajs[3];
    let pts = named.trajectory.points().to_vec();
    let dt = named.trajectory.dt();
    let t0 = pts[0].t;
    let seed = mix_seed(cfg.run.seed, 2, (3u64) << 16);
    let sched = build_schedule(&cfg, &named.trajectory, seed).unwrap();
    eprintln!("window [{:.1}, {:.1}] bias {:?}", sched.start, sched.end, sched.kind);
    let mut inspector = |p: &spoofguard::pipeline::Pipeline, e: &Event| match e {
        Event::Rsu(f) => {
            let idx = (((f.t_emitted - t0) / dt).round() as usize).min(pts.len() - 1);
            let tr = &pts[idx];
            let err = ((f.position[0] - tr.x).powi(2) + (f.position[1] - tr.y).powi(2)).sqrt();
            println!("t={:6.1} ANCHOR fix_err={err:.2} trace={:.3}", f.t_emitted, f.covariance.trace());
        }
        Event::Gps { fix, .. } => {
            if fix.t > sched.start - 6.0 && fix.t < sched.start + 12.0 {
                let idx = (((fix.t - t0) / dt).round() as usize).min(pts.len() - 1);
                let tr = &pts[idx];
                let pred = p.predictor();
                let pred_err = ((pred.state.px - tr.x).powi(2) + (pred.state.py - tr.y).powi(2)).sqrt();
                let z_err = ((fix.px - tr.x).powi(2) + (fix.py - tr.y).powi(2)).sqrt();
                println!(
                    "t={:6.1} GPS spoofed={} z_err={z_err:5.2} pred_err={pred_err:5.2} pred_speed={:.2} truth_speed={:.2} anchored_at={:.1}",
                    fix.t, fix.spoofed as u8, pred.state.speed, tr.speed, pred.anchored_at
                );
            }
        }
        _ => {}
    };
    run_trip(&named.trajectory, &cfg, &sched, seed, Some(DetectorId::IForest), true, Some(forest.clone()), Some(&mut inspector)).unwrap();
}
