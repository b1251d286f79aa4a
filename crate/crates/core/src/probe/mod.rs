//! Linear discriminative probes on pooled activations, and supervised training
//! of small sequential classifiers.

mod classifier;

pub use classifier::{evaluate, train_classifier, train_on_tensors, TrainedClassifier};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_range, Dataset, ModelGraph, EVAL_BATCH};
use crate::tensor::{self, gemm, Tensor};

/// Optimisation settings shared by probe fitting and classifier training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Probe defaults: lr 0.05, 100 epochs, batch 64, weight decay 1e-4.
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, epochs: 100, batch_size: 64, weight_decay: 1e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// One row of a training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Pooled, flattened activations of one layer with within-cluster targets.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `[N, C_out * k'^2]`; features of filter `f` occupy columns `f*k'^2 .. (f+1)*k'^2`.
    pub rows: Tensor,
    /// Target index per row, in `0..classes.len()`.
    pub targets: Vec<usize>,
    /// Original class label of each target index, ascending.
    pub classes: Vec<usize>,
    pub k_prime: usize,
    pub source_layer: usize,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn num_targets(&self) -> usize {
        self.classes.len()
    }
}

/// Pooled features of conv layer `layer` (taken after its activation) for
/// every sample of `dataset`. Targets are re-indexed `0..|classes|` in
/// ascending order of the original labels present.
pub fn collect_features(model: &ModelGraph, layer: usize, dataset: &Dataset, k_prime: usize) -> Result<FeatureMatrix> {
    let act = model.activation_layer(layer)?;
    let shape = model.shape_after(act);
    if k_prime == 0 || k_prime > shape[1].min(shape[2]) {
        return Err(Error::invalid(format!(
            "k' = {k_prime} exceeds the {}x{} activation of layer {layer}",
            shape[1], shape[2]
        )));
    }
    let dim = shape[0] * k_prime * k_prime;
    let n = dataset.len();
    let mut rows = Vec::with_capacity(n * dim);
    for start in (0..n).step_by(EVAL_BATCH) {
        let (batch, _) = dataset.batch(start, start + EVAL_BATCH);
        let a = forward_range(model, &batch, 0..act + 1, None)?;
        rows.extend_from_slice(tensor::adaptive_avg_pool(&a, k_prime)?.data());
    }
    let classes = dataset.classes_present();
    let targets = dataset
        .labels()
        .iter()
        .map(|l| classes.binary_search(l).expect("label is present"))
        .collect();
    Ok(FeatureMatrix { rows: Tensor::new(vec![n, dim], rows)?, targets, classes, k_prime, source_layer: layer })
}

/// Bias-free linear map from features to target logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    /// `[num_targets, feature_dim]`
    pub weights: Tensor,
    pub trained: bool,
}

impl ProbeModel {
    pub fn num_targets(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn logits(&self, rows: &Tensor) -> Result<Tensor> {
        tensor::dense(rows, &self.weights, &Tensor::zeros(&[self.num_targets()]))
    }

    pub fn predict(&self, rows: &Tensor) -> Result<Vec<usize>> {
        Ok(crate::model::argmax_rows(&self.logits(rows)?))
    }

    /// Mean cross-entropy over `rows` and its gradient with respect to the weights.
    pub fn loss_and_gradient(&self, rows: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
        let (loss, g) = tensor::cross_entropy_batch(&self.logits(rows)?, targets)?;
        let (t, d) = (self.num_targets(), self.feature_dim());
        let mut grad = vec![0f32; t * d];
        gemm::gemm_tn(t, targets.len(), d, g.data(), rows.data(), &mut grad);
        Ok((loss, Tensor::new(vec![t, d], grad)?))
    }
}

/// Probe after training plus the quantities scoring needs.
#[derive(Clone, Debug)]
pub struct ProbeFit {
    pub probe: ProbeModel,
    /// Gradient of the mean loss over all rows, at the final weights.
    pub mean_gradient: Tensor,
    /// Full-data loss and accuracy; entry 0 is the initial (zero) probe.
    pub trace: Vec<EpochStats>,
}

fn full_stats(probe: &ProbeModel, f: &FeatureMatrix) -> Result<(f64, f64, Tensor)> {
    let (loss, grad) = probe.loss_and_gradient(&f.rows, &f.targets)?;
    let acc = crate::model::accuracy_of(&probe.predict(&f.rows)?, &f.targets);
    Ok((loss, acc, grad))
}

/// Trains a zero-initialised probe by mini-batch gradient descent on softmax
/// cross-entropy.
///
/// After every epoch the full-data loss is checked; if it went up, the epoch
/// is undone and the learning rate halved, so the recorded loss never rises.
pub fn fit_probe(features: &FeatureMatrix, config: &TrainConfig) -> Result<ProbeFit> {
    config.validate()?;
    let n = features.len();
    let distinct = features.targets.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 || features.num_targets() < 2 {
        return Err(Error::invalid("probe needs samples from at least two classes"));
    }
    if features.rows.shape() != [n, features.feature_dim()] {
        return Err(Error::shape("fit_probe", format!("rows {:?} for {n} targets", features.rows.shape())));
    }
    let (t, d) = (features.num_targets(), features.feature_dim());
    let mut probe = ProbeModel { weights: Tensor::zeros(&[t, d]), trained: false };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lr = config.learning_rate;
    let (mut best_loss, acc0, _) = full_stats(&probe, features)?;
    let mut trace = vec![EpochStats { epoch: 0, loss: best_loss, accuracy: acc0 }];
    let mut order: Vec<usize> = (0..n).collect();
    let full_batch = config.batch_size >= n;
    for epoch in 1..=config.epochs {
        let before = probe.weights.clone();
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let (rows, targets) = if full_batch {
                (features.rows.clone(), features.targets.clone())
            } else {
                (features.rows.select_outer(chunk)?, chunk.iter().map(|&i| features.targets[i]).collect())
            };
            let (_, grad) = probe.loss_and_gradient(&rows, &targets)?;
            tensor::sgd_update(&mut probe.weights, &grad, lr, config.weight_decay);
        }
        let (loss, acc, _) = full_stats(&probe, features)?;
        if loss > best_loss || !loss.is_finite() {
            probe.weights = before;
            lr *= 0.5;
            let (l, a, _) = full_stats(&probe, features)?;
            trace.push(EpochStats { epoch, loss: l, accuracy: a });
        } else {
            best_loss = loss;
            trace.push(EpochStats { epoch, loss, accuracy: acc });
        }
    }
    probe.trained = true;
    let (_, _, mean_gradient) = full_stats(&probe, features)?;
    Ok(ProbeFit { probe, mean_gradient, trace })
}

/// Fraction of rows the probe classifies correctly.
pub fn probe_accuracy(probe: &ProbeModel, features: &FeatureMatrix) -> Result<f64> {
    Ok(crate::model::accuracy_of(&probe.predict(&features.rows)?, &features.targets))
}
