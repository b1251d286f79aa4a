//! Shared fixtures for the integration tests.

#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semroute::desk::{self, DeskBenchmark, DeskConfig};
use semroute::model::{ClusterId, ModelBuilder, ModelGraph, SubgraphAnnotation, ANNOTATION_FORMAT_VERSION};
use semroute::probe::{train_classifier, TrainConfig};
use semroute::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// A random small sequential CNN: two or three convs (optionally strided or
/// pooled), an adaptive pool or plain flatten, and one or two dense layers.
pub fn random_model(seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    let c = r.random_range(1..=3);
    let hw = r.random_range(6..=10);
    let mut b = ModelBuilder::new(&[c, hw, hw], seed);
    let convs = r.random_range(2..=3);
    let mut size = hw;
    for i in 0..convs {
        let out = r.random_range(2..=6);
        let (k, pad) = if size >= 5 && r.random_bool(0.5) { (3, 0) } else { (3, 1) };
        let stride = if i == 0 && r.random_bool(0.3) { 2 } else { 1 };
        b = b.conv2d(&format!("c{i}"), out, k, stride, pad);
        size = (size + 2 * pad - k) / stride + 1;
        b = b.relu();
        if size >= 4 && r.random_bool(0.3) {
            b = b.maxpool2();
            size /= 2;
        }
    }
    if r.random_bool(0.5) {
        b = b.adaptive_avg_pool(r.random_range(1..=size.min(3)));
    }
    b = b.flatten();
    let classes = r.random_range(2..=5);
    if r.random_bool(0.5) {
        b = b.dense("d0", r.random_range(3..=8)).relu();
    }
    b.dense("out", classes).build().expect("random model is shape-consistent")
}

/// A valid annotation with a random split conv layer and random non-empty
/// retained sets. `keep` is the per-filter keep probability.
pub fn random_annotation(model: &ModelGraph, seed: u64, keep: f64) -> SubgraphAnnotation {
    let mut r = rng(seed ^ 0x5eed);
    let convs = model.conv_layers();
    let split = convs[r.random_range(0..convs.len())];
    let mut retained = BTreeMap::new();
    for &l in convs.iter().filter(|&&l| l >= split) {
        let c = model.conv_out_channels(l).unwrap();
        let mut kept: Vec<usize> = (0..c).filter(|_| r.random_bool(keep)).collect();
        if kept.is_empty() {
            kept.push(r.random_range(0..c));
        }
        retained.insert(l, kept);
    }
    SubgraphAnnotation {
        format_version: ANNOTATION_FORMAT_VERSION,
        cluster_id: ClusterId::Cluster(0),
        split_layer: split,
        r_last: 1.0,
        r_split: 1.0,
        recorded_accuracy: 0.0,
        retained,
    }
}

/// Annotation keeping exactly `count` randomly chosen filters per layer (capped).
pub fn annotation_with_count(model: &ModelGraph, split: usize, count: usize, seed: u64) -> SubgraphAnnotation {
    let mut r = rng(seed);
    let mut retained = BTreeMap::new();
    for l in model.conv_layers().into_iter().filter(|&l| l >= split) {
        let c = model.conv_out_channels(l).unwrap();
        let mut kept = sample(&mut r, c, count.min(c)).into_vec();
        kept.sort_unstable();
        retained.insert(l, kept);
    }
    SubgraphAnnotation {
        format_version: ANNOTATION_FORMAT_VERSION,
        cluster_id: ClusterId::Cluster(0),
        split_layer: split,
        r_last: 1.0,
        r_split: 1.0,
        recorded_accuracy: 0.0,
        retained,
    }
}

pub fn tiny_desk_config() -> DeskConfig {
    DeskConfig {
        clusters: 3,
        classes_per_cluster: 2,
        image_size: 16,
        train_per_class: 120,
        val_per_class: 20,
        test_per_class: 20,
        pixel_noise: 0.2,
        seed: 11,
    }
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig { learning_rate: 0.03, epochs: 12, batch_size: 16, weight_decay: 1e-4, seed: 3 }
}

pub struct Trained {
    pub bench: DeskBenchmark,
    pub model: ModelGraph,
}

/// A small benchmark and a model trained on it, built once per test binary.
pub fn tiny_trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = tiny_desk_config();
        let bench = desk::generate(&cfg).unwrap();
        let net = desk::desk_model(&cfg, 5).unwrap();
        let model = train_classifier(&net, &bench.train, &tiny_train_config()).unwrap().model;
        Trained { bench, model }
    })
}
