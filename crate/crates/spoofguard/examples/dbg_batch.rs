use spoofguard::harness::{render_report_txt, run_batch, train_forest};
use spoofguard::scenario::ScenarioConfig;
use std::sync::Arc;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = args.get(1).map(|s| s.as_str()).unwrap_or("constant_bias");
    let mut cfg = ScenarioConfig::default();
    if kind == "stealthy" {
        cfg.attack.kind = spoofguard::attack::AttackMenu::Stealthy;
    }
    let forest = Arc::new(train_forest(&cfg).unwrap());
    let out = run_batch(&cfg, &forest).unwrap();
    println!("{}", render_report_txt(&out.report));
}
