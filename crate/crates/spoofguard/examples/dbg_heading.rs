use spoofguard::attack::AttackSchedule;
use spoofguard::harness::{resolve_trajectories, run_trip};
use spoofguard::pipeline::Event;
use spoofguard::scenario::ScenarioConfig;

fn main() {
    let cfg = ScenarioConfig::default();
    let trajs = resolve_trajectories(&cfg).unwrap();
    let named = &trajs[1];
    let pts = named.trajectory.points().to_vec();
    let dt = named.trajectory.dt();
    let t0 = pts[0].t;
    let mut rows = Vec::new();
    {
        let mut inspector = |p: &spoofguard::pipeline::Pipeline, e: &Event| {
            if let Event::Gps { fix, .. } = e {
                let idx = (((fix.t - t0) / dt).round() as usize).min(pts.len() - 1);
                let truth = &pts[idx];
                let heading_err = (p.state().heading - truth.heading).abs();
                let claimed = p.covariance().as_matrix()[(2, 2)].sqrt();
                rows.push((fix.t, heading_err, claimed));
            }
        };
        run_trip(&named.trajectory, &cfg, &AttackSchedule::none(), 7, None, true, None, Some(&mut inspector)).unwrap();
    }
    for (t, err, claimed) in rows.iter().step_by(10) {
        println!("t={t:6.1} heading err {err:.4} claimed std {claimed:.4}");
    }
}
