use spoofguard::attack::AttackSchedule;
use spoofguard::harness::{resolve_trajectories, run_trip};
use spoofguard::pipeline::Event;
use spoofguard::scenario::ScenarioConfig;

fn main() {
    for gate in [1.0, 2.5, 6.25] {
        let mut cfg = ScenarioConfig::default();
        cfg.rsu.fix_quality_max = gate;
        let trajs = resolve_trajectories(&cfg).unwrap();
        let mut n_anchors = 0usize;
        let mut pred_errors = Vec::new();
        let mut fix_errors = Vec::new();
        let mut rmse_sum = 0.0;
        let n_trips = 8;
        for named in trajs.iter().take(n_trips) {
            let pts = named.trajectory.points().to_vec();
            let dt = named.trajectory.dt();
            let t0 = pts[0].t;
            {
                let mut inspector = |p: &spoofguard::pipeline::Pipeline, e: &Event| match e {
                    Event::Rsu(f) => {
                        n_anchors += 1;
                        let idx = (((f.t_emitted - t0) / dt).round() as usize).min(pts.len() - 1);
                        let truth = &pts[idx];
                        fix_errors.push(((f.position[0] - truth.x).powi(2) + (f.position[1] - truth.y).powi(2)).sqrt());
                    }
                    Event::Gps { fix, .. } => {
                        let idx = (((fix.t - t0) / dt).round() as usize).min(pts.len() - 1);
                        let truth = &pts[idx];
                        pred_errors.push(((p.predictor().state.px - truth.x).powi(2) + (p.predictor().state.py - truth.y).powi(2)).sqrt());
                    }
                    _ => {}
                };
                let run = run_trip(&named.trajectory, &cfg, &AttackSchedule::none(), 7, None, true, None, Some(&mut inspector)).unwrap();
                rmse_sum += run.rmse;
            }
        }
        let q = |v: &mut Vec<f64>, p: f64| { v.sort_by(|a, b| a.partial_cmp(b).unwrap()); if v.is_empty() {0.0} else { v[((v.len()-1) as f64 * p) as usize] } };
        let (p50, p80, p95) = (q(&mut pred_errors.clone(), 0.5), q(&mut pred_errors.clone(), 0.8), q(&mut pred_errors.clone(), 0.95));
        let fmax = fix_errors.iter().cloned().fold(0.0, f64::max);
        let f95 = q(&mut fix_errors.clone(), 0.95);
        println!("gate {gate:>6}: anchors {n_anchors:5} | pred err p50 {p50:.2} p80 {p80:.2} p95 {p95:.2} | fix err p95 {f95:.2} max {fmax:.2} | mean rmse {:.2}", rmse_sum / n_trips as f64);
    }
}
