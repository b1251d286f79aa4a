//! Ranks the filters of one conv layer for a single semantic cluster with
//! every scoring criterion, then keeps half of them under each ranking and
//! compares how much cluster accuracy survives.
//!
//! ```text
//! cargo run --release --example dcs_scoring
//! ```

mod common;

use semroute::extract::{extract_subgraph, EvalSet, ExtractionConfig, ScoreCache};
use semroute::model::ClusterId;
use semroute::scoring::{score_layer, Criterion, ScoringConfig};

fn main() -> semroute::Result<()> {
    let (bench, model) = common::small_desk()?;

    let cluster = &bench.cluster_map.clusters[0];
    let subset = bench.train.filter_classes(&cluster.classes);
    let layer = 5;
    println!("cluster {} (classes {:?}), layer {layer}: {} filters", cluster.id, cluster.classes, model.conv_out_channels(layer)?);

    let criteria = [Criterion::Dcs, Criterion::Taylor, Criterion::Apoz, Criterion::Sensitivity, Criterion::L1, Criterion::Random];
    for criterion in criteria {
        let table = score_layer(&model, layer, &subset, &ScoringConfig { criterion, ..ScoringConfig::default() })?;
        println!("{:<12} top 6 {:?}", criterion.name(), table.top(6));
    }

    // Keep half the filters from the split layer to the last conv under each criterion.
    let eval = EvalSet::new(&model, &bench.test.filter_classes(&cluster.classes), layer)?;
    let mut cache = ScoreCache::new();
    println!("\n{:<12} {:>9} {:>10} {:>10}", "criterion", "accuracy", "in-cluster", "MACs");
    for criterion in criteria {
        let mut config = ExtractionConfig::new(layer).with_retention(0.5, 0.5);
        config.criterion = criterion;
        let e = extract_subgraph(&model, ClusterId::Cluster(cluster.id), &cluster.classes, &subset, &eval, &config, &mut cache)?;
        println!("{:<12} {:>9.4} {:>10.4} {:>10}", criterion.name(), e.accuracy, e.restricted_accuracy, e.mac_count);
    }
    Ok(())
}
