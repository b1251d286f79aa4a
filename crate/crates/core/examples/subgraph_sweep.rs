//! Sweeps retention rates for every cluster, accepts the grid points that
//! stay within epsilon of the base accuracy and picks the cheapest one.
//!
//! ```text
//! cargo run --release --example subgraph_sweep
//! ```

mod common;

use semroute::extract::{sweep_extract, ClusterData, ExtractionConfig, ScoreCache, SweepGrid};
use semroute::model::mac_count;

fn main() -> semroute::Result<()> {
    let (bench, model) = common::small_desk()?;
    let split = 3;

    let clusters = ClusterData::for_clusters(&model, &bench.cluster_map, &bench.train, &bench.val, split)?;
    for c in &clusters {
        println!("cluster {} base accuracy {:.4}", c.cluster, c.base_accuracy);
    }
    let mean_base = clusters.iter().map(|c| c.base_accuracy).sum::<f64>() / clusters.len() as f64;
    let config = ExtractionConfig::new(split).with_derived_tau(mean_base);
    let grid = SweepGrid { r_last: vec![1.0, 0.75, 0.5, 0.25], r_split: vec![1.0, 0.9] };
    let sweep = sweep_extract(&model, &clusters, &grid, &config, &mut ScoreCache::new())?;

    println!("\ntau_acc {:.4}, full model {} MACs", sweep.tau_acc, mac_count(&model, None)?);
    println!("{:>5} {:>5} {:>9} {:>10} {:>9}", "r_L", "r_M", "accuracy", "MACs", "accepted");
    for p in &sweep.points {
        println!("{:>5} {:>5} {:>9.4} {:>10.0} {:>9}", p.r_last, p.r_split, p.avg_accuracy, p.avg_mac_count, p.accepted);
    }
    let front: Vec<_> = sweep.pareto.iter().map(|&i| (sweep.points[i].r_last, sweep.points[i].r_split)).collect();
    println!("pareto front {front:?}");
    match sweep.best_point() {
        Some(best) => println!("cheapest accepted point r_L {} r_M {}", best.r_last, best.r_split),
        None => println!("no point reached tau_acc"),
    }
    for a in sweep.routable_annotations(&clusters) {
        let kept: Vec<_> = a.retained.iter().map(|(l, f)| (*l, f.len())).collect();
        println!("routable cluster {}: filters kept per layer {kept:?}", a.cluster_id);
    }
    Ok(())
}
