//! A small synthetic benchmark with a two-level label hierarchy, and the
//! reference CNN used with it.
//!
//! Each class belongs to one cluster. Cluster identity is carried by a colour
//! palette and a base grating orientation; classes inside a cluster differ by
//! a small orientation offset and the grating frequency, so telling clusters
//! apart is much easier than telling their members apart.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cluster, ClusterMap, Dataset, ModelBuilder, ModelGraph, Split};
use crate::probe::TrainConfig;
use crate::tensor::Tensor;

const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.25, 0.2],
    [0.2, 1.0, 0.3],
    [0.25, 0.3, 1.0],
    [1.0, 0.95, 0.2],
    [0.2, 0.95, 1.0],
    [1.0, 0.3, 1.0],
    [0.6, 0.6, 0.6],
    [1.0, 0.6, 0.1],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub clusters: usize,
    pub classes_per_cluster: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub pixel_noise: f32,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            clusters: 5,
            classes_per_cluster: 4,
            image_size: 32,
            train_per_class: 150,
            val_per_class: 40,
            test_per_class: 50,
            pixel_noise: 0.7,
            seed: 7,
        }
    }
}

impl DeskConfig {
    pub fn num_classes(&self) -> usize {
        self.clusters * self.classes_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.clusters > PALETTE.len() {
            return Err(Error::invalid(format!("cluster count must be 1..={}", PALETTE.len())));
        }
        if self.classes_per_cluster == 0 || self.classes_per_cluster > 4 {
            return Err(Error::invalid("classes per cluster must be 1..=4"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("images must be at least 8 pixels wide"));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("every split needs at least one sample per class"));
        }
        Ok(())
    }
}

/// The three splits, the cluster map and human-readable class names.
#[derive(Clone, Debug)]
pub struct DeskBenchmark {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub cluster_map: ClusterMap,
    pub class_names: Vec<String>,
}

pub fn generate(config: &DeskConfig) -> Result<DeskBenchmark> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = make_split(config, config.train_per_class, Split::Train, &mut rng)?;
    let val = make_split(config, config.val_per_class, Split::Val, &mut rng)?;
    let test = make_split(config, config.test_per_class, Split::Test, &mut rng)?;
    let per = config.classes_per_cluster;
    let clusters = (0..config.clusters)
        .map(|g| Cluster { id: g, name: format!("group{g}"), classes: (g * per..(g + 1) * per).collect() })
        .collect();
    let class_names = (0..config.num_classes()).map(|k| format!("g{}c{}", k / per, k % per)).collect();
    Ok(DeskBenchmark { train, val, test, cluster_map: ClusterMap::new(clusters, config.num_classes())?, class_names })
}

fn make_split(config: &DeskConfig, per_class: usize, split: Split, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let s = config.image_size;
    let n = per_class * config.num_classes();
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Interleave classes so any prefix of the split is roughly balanced.
        let class = i % config.num_classes();
        render(config, class, rng, &mut data);
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 3, s, s], data)?, labels, split)
}

fn render(config: &DeskConfig, class: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let g = class / config.classes_per_cluster;
    let j = class % config.classes_per_cluster;
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    let s = config.image_size as f32;

    let offset = if j.is_multiple_of(2) { -PI / 30.0 } else { PI / 30.0 };
    let theta = g as f32 * PI / config.clusters as f32 + offset + 0.05 * unit.sample(rng);
    let freq = if j / 2 == 0 { 0.16 } else { 0.23 } * (1.0 + 0.06 * unit.sample(rng));
    let phase = rng.random_range(0.0..2.0 * PI);
    let gain = rng.random_range(0.7f32..1.3);
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let sigma = rng.random_range(0.18 * s..0.3 * s);
    let colour: Vec<f32> = PALETTE[g].iter().map(|c| gain * (c + 0.15 * unit.sample(rng))).collect();
    let background: Vec<f32> = (0..3).map(|_| 0.25 * unit.sample(rng)).collect();
    let (ct, st) = (theta.cos(), theta.sin());
    for ch in 0..3 {
        for y in 0..config.image_size {
            for x in 0..config.image_size {
                let (xf, yf) = (x as f32, y as f32);
                let env = (-((xf - cx).powi(2) + (yf - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
                let wave = (2.0 * PI * freq * (xf * ct + yf * st) + phase).cos();
                let v = background[ch] + colour[ch] * env * (0.5 + wave) + config.pixel_noise * unit.sample(rng);
                out.push(v);
            }
        }
    }
}

/// The reference network: five 3x3 convolutions in three stages followed by
/// two dense layers.
///
/// Layer indices: convs at 0, 3, 5, 8, 10; dense at 14 and 16.
pub fn desk_model(config: &DeskConfig, seed: u64) -> Result<ModelGraph> {
    let s = config.image_size;
    desk_model_for(&[3, s, s], config.num_classes(), seed)
}

/// [`desk_model`] for arbitrary `[C, H, W]` inputs (H and W at least 8).
pub fn desk_model_for(input_shape: &[usize], num_classes: usize, seed: u64) -> Result<ModelGraph> {
    ModelBuilder::new(input_shape, seed)
        .conv2d("conv1", 8, 3, 1, 1)
        .relu()
        .maxpool2()
        .conv2d("conv2", 16, 3, 1, 1)
        .relu()
        .conv2d("conv3", 16, 3, 1, 1)
        .relu()
        .maxpool2()
        .conv2d("conv4", 32, 3, 1, 1)
        .relu()
        .conv2d("conv5", 32, 3, 1, 1)
        .relu()
        .maxpool2()
        .flatten()
        .dense("fc1", 64)
        .relu()
        .dense("fc2", num_classes)
        .build()
}

/// Optimiser settings that train [`desk_model`] on the default benchmark.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: 0.02, epochs: 12, batch_size: 32, weight_decay: 1e-4, seed }
}
