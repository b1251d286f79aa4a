//! Running a subgraph: only retained filters are computed from the split
//! layer on, and the cost drops with them.
//!
//! ```text
//! cargo run --example masked_execution
//! ```

use semroute::model::{forward_full, forward_masked, mac_count, ClusterId, MaskedPlan, ModelBuilder, SubgraphAnnotation};
use semroute::Tensor;

fn main() -> semroute::Result<()> {
    let model = ModelBuilder::new(&[3, 16, 16], 4)
        .conv2d("conv1", 16, 3, 1, 1)
        .relu()
        .maxpool2()
        .conv2d("conv2", 32, 3, 1, 1)
        .relu()
        .conv2d("conv3", 32, 3, 1, 1)
        .relu()
        .adaptive_avg_pool(2)
        .flatten()
        .dense("fc", 10)
        .build()?;
    let batch = Tensor::from_fn(&[4, 3, 16, 16], |i| ((i * 37) % 11) as f32 / 11.0 - 0.5);

    // Keep a quarter of conv2 and half of conv3; conv1 belongs to the shared prefix.
    let mut ann = SubgraphAnnotation::full(&model, ClusterId::Cluster(0), 3)?;
    ann.retained.insert(3, (0..8).collect());
    ann.retained.insert(5, (0..32).step_by(2).collect());
    ann.validate(&model)?;

    let (full, _) = forward_full(&model, &batch, &[])?;
    let masked = forward_masked(&model, &batch, &ann)?;
    println!("full logits[0]   {:?}", &full.data()[..4]);
    println!("masked logits[0] {:?}", &masked.data()[..4]);
    println!("MACs: full {}, subgraph {}", mac_count(&model, None)?, mac_count(&model, Some(&ann))?);

    // A plan is compiled once and can run many batches; the log shows what executed.
    let plan = MaskedPlan::new(&model, &ann)?;
    let mut log = Vec::new();
    let prefix = semroute::extract::prefix_activations(&model, &batch, plan.split_layer())?;
    plan.run_from_split(&model, &prefix, Some(&mut log))?;
    println!("layers run after the split: {log:?}");
    println!("annotation: {}", serde_json::to_string(&ann)?);
    Ok(())
}
