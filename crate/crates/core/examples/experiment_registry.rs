//! Runs one named experiment and prints its summary.
//!
//! `cargo run --example experiment_registry -- cusp-case2 mcs`

use csgm::pipeline::{experiment, Backend, ExperimentOptions, EXPERIMENTS};

fn main() -> csgm::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "cusp-case2".into());
    let backends = args.map(|b| b.parse::<Backend>()).collect::<csgm::Result<Vec<_>>>()?;
    if !EXPERIMENTS.contains(&name.as_str()) {
        eprintln!("available experiments: {}", EXPERIMENTS.join(", "));
    }
    let opts = ExperimentOptions { backends, ..Default::default() };
    let report = experiment(&name, &opts)?;
    print!("{}", report.summary());
    println!("{}", serde_json::to_string_pretty(&report.metrics_json()["metrics"])?);
    for r in &report.runs {
        println!("{}: {}", r.ensemble.backend.name(), serde_json::to_string(&r.metrics)?);
    }
    Ok(())
}
