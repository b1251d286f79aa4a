//! Saving a model and an annotation to disk and loading them back.
//!
//! ```text
//! cargo run --example model_archive
//! ```

use semroute::model::{forward_full, io, ClusterId, ModelBuilder, SubgraphAnnotation};
use semroute::Tensor;

fn main() -> semroute::Result<()> {
    let model = ModelBuilder::new(&[1, 8, 8], 9)
        .conv2d("conv", 4, 3, 1, 1)
        .relu()
        .flatten()
        .dense("fc", 3)
        .class_names(vec!["a".into(), "b".into(), "c".into()])
        .build()?;
    let dir = std::env::temp_dir().join("semroute_model_archive");
    io::save_model(&model, &dir)?;
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        println!("{:>8} bytes  {}", entry.metadata()?.len(), entry.file_name().to_string_lossy());
    }

    let back = io::load_model(&dir)?;
    let x = Tensor::full(&[1, 1, 8, 8], 0.3);
    let same = forward_full(&model, &x, &[])?.0 == forward_full(&back, &x, &[])?.0;
    println!("reloaded model identical: {}, logits identical: {same}", back == model);

    let mut ann = SubgraphAnnotation::full(&model, ClusterId::Cluster(2), 0)?;
    ann.retained.insert(0, vec![1, 3]);
    let path = dir.join("cluster_2.json");
    ann.save(&path)?;
    let loaded = SubgraphAnnotation::load(&path, Some(&back))?;
    println!("annotation round trip identical: {}", loaded == ann);

    // Damage the archive and watch loading fail.
    let weights = std::fs::read_dir(&dir)?.filter_map(|e| e.ok()).find(|e| e.path().extension().is_some_and(|x| x == "bin"));
    if let Some(w) = weights {
        let bytes = std::fs::read(w.path())?;
        std::fs::write(w.path(), &bytes[..bytes.len() / 2])?;
        println!("truncated {}: {}", w.file_name().to_string_lossy(), io::load_model(&dir).unwrap_err());
    }
    Ok(())
}
