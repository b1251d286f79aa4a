//! Reduced benchmark shared by the examples: 3 clusters of 2 classes at
//! 24x24, trained in a few seconds to roughly 90% test accuracy.

use semroute::desk::{self, DeskBenchmark, DeskConfig};
use semroute::model::ModelGraph;
use semroute::probe::{evaluate, train_classifier, TrainConfig};

pub fn small_desk() -> semroute::Result<(DeskBenchmark, ModelGraph)> {
    let data = DeskConfig {
        clusters: 3,
        classes_per_cluster: 2,
        image_size: 24,
        train_per_class: 100,
        val_per_class: 20,
        test_per_class: 30,
        pixel_noise: 0.3,
        ..DeskConfig::default()
    };
    let bench = desk::generate(&data)?;
    let training = TrainConfig { epochs: 20, ..desk::desk_train_config(1) };
    let model = train_classifier(&desk::desk_model(&data, 1)?, &bench.train, &training)?.model;
    println!("base model test accuracy {:.4}", evaluate(&model, &bench.test)?);
    Ok((bench, model))
}
