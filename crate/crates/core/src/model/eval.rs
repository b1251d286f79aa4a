use super::{exec, ModelGraph};
use crate::error::Result;
use crate::tensor::Tensor;

/// Rows processed per forward call when sweeping a whole dataset.
pub const EVAL_BATCH: usize = 128;

/// Logits `[N, classes]` for every image of `images`, computed in chunks.
pub fn predict_logits(model: &ModelGraph, images: &Tensor) -> Result<Tensor> {
    model.check_batch(images)?;
    let n = images.outer_len();
    let mut data = Vec::with_capacity(n * model.num_classes());
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let (logits, _) = exec::forward_full(model, &images.select_outer(&idx)?, &[])?;
        data.extend_from_slice(logits.data());
    }
    Tensor::new(vec![n, model.num_classes()], data)
}

/// Row-wise argmax of a `[N, C]` tensor.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits.data().chunks_exact(c).map(Tensor::argmax).collect()
}

/// Argmax restricted to the columns in `allowed` (ties go to the first listed).
pub fn argmax_rows_within(logits: &Tensor, allowed: &[usize]) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = allowed[0];
            for &k in &allowed[1..] {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
