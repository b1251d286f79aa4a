use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EpochStats, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{self, backward, forward_cached, BackwardRequest, Dataset, LayerKind, ModelGraph};
use crate::tensor::{self, Tensor};

/// A trained copy of a network together with its per-epoch trace.
#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub model: ModelGraph,
    pub trace: Vec<EpochStats>,
}

/// Trains every parameter of a copy of `network` with mini-batch SGD on
/// softmax cross-entropy. A trailing softmax layer is skipped for the loss.
pub fn train_classifier(network: &ModelGraph, dataset: &Dataset, config: &TrainConfig) -> Result<TrainedClassifier> {
    train_on_tensors(network, dataset.images(), dataset.labels(), config)
}

/// As [`train_classifier`] but over raw inputs shaped `[N, network input]`.
pub fn train_on_tensors(
    network: &ModelGraph,
    inputs: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainedClassifier> {
    config.validate()?;
    let n = network.check_batch(inputs)?;
    if n != labels.len() || n == 0 {
        return Err(Error::invalid(format!("{n} inputs for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= network.num_classes()) {
        return Err(Error::invalid(format!("label {bad} outside {} classes", network.num_classes())));
    }
    let mut net = network.clone();
    let top = logits_layer(&net);
    let request = BackwardRequest { param_grads: true, top: Some(top), ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0f64, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = inputs.select_outer(chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let cache = forward_cached(&net, &batch)?;
            let logits = cache.layer_output(top);
            let (loss, grad) = tensor::cross_entropy_batch(logits, &targets)?;
            loss_sum += loss * chunk.len() as f64;
            hits += model::argmax_rows(logits).iter().zip(&targets).filter(|(p, t)| p == t).count();
            let grads = backward(&net, &cache, &grad, &request)?;
            for (l, (gw, gb)) in &grads.params {
                let (w, b) = net.layers_mut()[*l].params_mut().expect("parameterised layer");
                tensor::sgd_update(w, gw, config.learning_rate, config.weight_decay);
                tensor::sgd_update(b, gb, config.learning_rate, config.weight_decay);
            }
        }
        let stats = EpochStats { epoch, loss: loss_sum / n as f64, accuracy: hits as f64 / n as f64 };
        log::debug!("epoch {epoch}: loss {:.4} acc {:.3}", stats.loss, stats.accuracy);
        if !stats.loss.is_finite() {
            return Err(Error::invalid(format!("training diverged at epoch {epoch}")));
        }
        trace.push(stats);
    }
    Ok(TrainedClassifier { model: net, trace })
}

fn logits_layer(net: &ModelGraph) -> usize {
    let last = net.len() - 1;
    match net.layers()[last].kind {
        LayerKind::Softmax if last > 0 => last - 1,
        _ => last,
    }
}

/// Top-1 accuracy of `network` on `dataset`.
pub fn evaluate(network: &ModelGraph, dataset: &Dataset) -> Result<f64> {
    let logits = model::predict_logits(network, dataset.images())?;
    Ok(model::accuracy_of(&model::argmax_rows(&logits), dataset.labels()))
}
