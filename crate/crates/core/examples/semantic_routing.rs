//! Builds a router end to end at small scale: picks the split layer, trains
//! the route predictor, extracts one subgraph per cluster and shows how the
//! confidence threshold trades routed inputs against accuracy and MACs.
//!
//! ```text
//! cargo run --release --example semantic_routing
//! ```

mod common;

use semroute::desk;
use semroute::extract::{sweep_extract, ClusterData, ExtractionConfig, ScoreCache, SweepGrid};
use semroute::model::accuracy_of;
use semroute::probe::TrainConfig;
use semroute::router::{select_split_layer, train_srp, Router, RoutingConfig};

fn main() -> semroute::Result<()> {
    let (bench, model) = common::small_desk()?;

    let split = select_split_layer(&model, &bench.train, &bench.val, 0.75, 2, &TrainConfig::default())?;
    println!("split layer {} (candidates {:?})", split.layer, split.candidates);
    let (srp, report) = train_srp(&model, split.layer, &bench.train, &bench.val, &bench.cluster_map, &desk::desk_train_config(2))?;
    println!("route predictor held-out accuracy {:.4}", report.held_out_accuracy);

    let clusters = ClusterData::for_clusters(&model, &bench.cluster_map, &bench.train, &bench.val, split.layer)?;
    let mean_base = clusters.iter().map(|c| c.base_accuracy).sum::<f64>() / clusters.len() as f64;
    let config = ExtractionConfig::new(split.layer).with_derived_tau(mean_base);
    let grid = SweepGrid { r_last: vec![0.75, 0.5], r_split: vec![1.0] };
    let sweep = sweep_extract(&model, &clusters, &grid, &config, &mut ScoreCache::new())?;
    let annotations = sweep.routable_annotations(&clusters);
    println!("{} of {} clusters have a subgraph", annotations.len(), clusters.len());

    let mut router = Router::new(model, srp, &annotations, RoutingConfig::new(1.0)?)?;
    println!("\n{:>5} {:>7} {:>9} {:>10}", "alpha", "routed", "accuracy", "mean MACs");
    for alpha in [1.0, 0.9, 0.7, 0.5, 0.3, 0.0] {
        router.set_alpha(alpha)?;
        let out = router.infer_batch(bench.test.images())?;
        let preds: Vec<usize> = out.iter().map(|r| r.prediction).collect();
        let routed = out.iter().filter(|r| r.decision.routed).count() as f64 / out.len() as f64;
        let macs = out.iter().map(|r| r.macs as f64).sum::<f64>() / out.len() as f64;
        println!("{alpha:>5} {routed:>7.3} {:>9.4} {macs:>10.0}", accuracy_of(&preds, bench.test.labels()));
    }

    // Walk through the first input that actually takes a subgraph. On a network
    // this small the route predictor costs about as much as the pruning saves.
    router.set_alpha(0.5)?;
    let (_, decisions) = router.decide(bench.test.images())?;
    if let Some(i) = decisions.iter().position(|d| d.routed) {
        let one = router.infer(&bench.test.images().select_outer(&[i])?)?;
        println!("\ntest image {i}: label {}, prediction {}", bench.test.labels()[i], one.prediction);
        println!("  decision {:?}", one.decision);
        println!("  layers run {:?}", one.layers_run);
        println!("  MACs {:?} = {} (full model {})", one.stage_macs, one.macs, router.full_macs());
    }
    Ok(())
}
