//! Tags each filter of the first conv layer with the classes it fires for
//! most often and compares how many filters classes of the same cluster
//! share against classes of different clusters.
//!
//! ```text
//! cargo run --release --example filter_sharing
//! ```

mod common;

use semroute::analysis::{activation_pattern, default_top_k, SharingProfile, DEFAULT_ACTIVATION_QUANTILE};

fn main() -> semroute::Result<()> {
    let (bench, model) = common::small_desk()?;
    let layer = model.conv_layers()[0];
    let k = model.num_classes();

    let pattern = activation_pattern(&model, layer, 0, &bench.test)?;
    let shown: Vec<String> = pattern.iter().map(|v| format!("{v:.2}")).collect();
    println!("class 0 activation pattern at layer {layer}: [{}]", shown.join(", "));

    let profile = SharingProfile::compute(&model, layer, &bench.test, DEFAULT_ACTIVATION_QUANTILE, default_top_k(k))?;
    for (f, tags) in profile.tags.iter().enumerate() {
        println!("filter {f}: classes {tags:?}");
    }

    let cluster_of = bench.cluster_map.class_to_cluster(k);
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    print!("\n    ");
    for b in 0..k {
        print!("{b:>6}");
    }
    println!();
    for a in 0..k {
        print!("{a:>4}");
        for b in 0..k {
            let s = profile.similarity(a, b);
            print!("{s:>6.2}");
            if a < b {
                if cluster_of[a] == cluster_of[b] { within.push(s) } else { cross.push(s) }
            }
        }
        println!();
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean similarity: within cluster {:.3}, across clusters {:.3}", mean(&within), mean(&cross));
    Ok(())
}
