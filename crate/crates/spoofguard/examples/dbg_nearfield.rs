use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofguard::estimator::{ImuSample, VehicleState};
use spoofguard::rsu::{localize_from_ranges, sample_range, RsuSite};

fn main() {
    let site = RsuSite { id: 0, coord: [0.0, 0.0], service_radius: 500.0, broadcast_rate: 10.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dt = 0.1;
    let speed = 12.0;
    let sigma = 0.25;
    let n = 101;
    for standoff in [100.0f64, 200.0, 350.0, 480.0] {
        let mut accepted = 0;
        let mut noconv = 0;
        let mut traces = Vec::new();
        let mut errs = Vec::new();
        for trial in 0..50 {
            let heading_err = rng.gen_range(-0.02..0.02f64);
            let speed_err = rng.gen_range(-0.2..0.2f64);
            let mut ranges = Vec::new();
            let mut odometry = Vec::new();
            let mut pos = Vector2::new(-(n as f64 - 1.0) * speed * dt, standoff);
            for k in 0..n {
                let t = k as f64 * dt;
                if k > 0 { odometry.push(ImuSample::new(t, 0.0, rng.gen_range(-0.005..0.005))); }
                if let Some(s) = sample_range(t, &pos, &site, sigma, &mut rng) { ranges.push(s); }
                if k + 1 < n { pos.x += speed * dt; }
            }
            if ranges.len() < n { continue; }
            let truth = pos;
            let prior = VehicleState::new(
                truth.x + rng.gen_range(-3.0..3.0),
                truth.y + rng.gen_range(-3.0..3.0),
                heading_err,
                speed + speed_err,
            );
            match localize_from_ranges(&ranges, &site, &odometry, &prior, 0.015, sigma, dt) {
                Ok(fix) => {
                    let tr = fix.covariance.trace();
                    traces.push(tr);
                    errs.push((fix.position_vec() - truth).norm());
                    if tr <= 2.5 { accepted += 1; }
                    if trial < 3 {
                        println!("  standoff {standoff}: trace {tr:.3} err {:.2}", (fix.position_vec() - truth).norm());
                    }
                }
                Err(e) => { noconv += 1; if trial < 3 { println!("  standoff {standoff}: ERR {e}"); } }
            }
        }
        traces.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med_tr = if traces.is_empty() { f64::NAN } else { traces[traces.len()/2] };
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med_err = if errs.is_empty() { f64::NAN } else { errs[errs.len()/2] };
        println!("standoff {standoff:>6}: accepted {accepted}/50 noconv {noconv} | median trace {med_tr:.3} err {med_err:.2}");
    }
}
