//! Simulate-estimate-compare run on the recovery scenario.
//!
//! `cargo run --release --example recovery -- [individuals] [draws] [seed]`

use std::time::Instant;

use deliberate::estimation::EstimateOptions;
use deliberate::synthesis::{recovery_experiment, ScenarioSpec};

fn main() -> deliberate::Result<()> {
    env_logger::init();
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let n = args.first().copied().unwrap_or(500) as usize;
    let q = args.get(1).copied().unwrap_or(500) as usize;
    let seed = args.get(2).copied().unwrap_or(deliberate::config::DEFAULT_SEED);
    let spec = ScenarioSpec::recovery(n, seed);
    let started = Instant::now();
    let report = recovery_experiment(&spec, q, 1, &EstimateOptions::default())?;
    for run in &report.runs {
        for row in &run.rows {
            println!(
                "{:<36} truth {:>9.4} estimate {:>9.4} se {:>8.4} |z| {:>6.2}",
                row.name, row.truth, row.estimate, row.robust_se, row.z
            );
        }
        println!(
            "converged {} after {} iterations, loglik {:.4}, share |z| < 2: {:.3}",
            run.converged, run.iterations, run.loglik, run.share_within_two
        );
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
