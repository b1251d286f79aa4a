//! Full run on the synthetic benchmark. Artifacts go to the directory given
//! as the first argument (default: `target/end_to_end`).
//!
//! ```text
//! cargo run --release --example end_to_end -- /tmp/run
//! ```

use std::path::PathBuf;

use semroute::pipeline::{self, PipelineConfig};

fn main() -> semroute::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("target/end_to_end"), PathBuf::from);
    let run = pipeline::run(&PipelineConfig::default(), Some(&out))?;
    let r = &run.report;
    println!("base test accuracy   {:.4}", r.base_test_accuracy);
    println!("split layer          {} (probe accuracies {:?})", r.split.layer, r.split.candidates);
    println!("route predictor acc  {:.4}", r.srp.held_out_accuracy);
    println!("accepted grid points {} (tau_acc {:.4}), best {:?}", r.accepted_points, r.tau_acc, r.best_point);
    println!("routable subgraphs   {}", r.annotations.len());
    println!("{:<10} {:>8} {:>8} {:>12} {:>12}", "scenario", "acc", "routed", "MACs", "median ms");
    for b in &r.bench {
        println!(
            "{:<10} {:>8.4} {:>8.3} {:>12.0} {:>12.4}",
            b.scenario,
            b.accuracy,
            b.routed_fraction,
            b.mac_count,
            b.latency_median_s * 1e3
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
