use std::collections::BTreeMap;
use std::ops::Range;

use super::{LayerKind, ModelGraph, SubgraphAnnotation};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Record of which layers actually executed, in order.
pub type ExecLog = Vec<usize>;

/// Runs the whole model on `batch` (`[N, C, H, W]`), returning logits `[N, classes]`
/// and the outputs of the layers listed in `taps`.
pub fn forward_full(model: &ModelGraph, batch: &Tensor, taps: &[usize]) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
    model.check_batch(batch)?;
    if let Some(&bad) = taps.iter().find(|&&t| t >= model.len()) {
        return Err(Error::invalid(format!("tap layer {bad} out of range for a {}-layer model", model.len())));
    }
    let mut tapped = BTreeMap::new();
    let mut x = batch.clone();
    for (i, layer) in model.layers().iter().enumerate() {
        x = layer.forward(&x)?;
        if taps.contains(&i) {
            tapped.insert(i, x.clone());
        }
    }
    Ok((x, tapped))
}

/// Runs layers `range` on `x`, whose per-sample shape must match the input of
/// `range.start`. Executed layer indices are appended to `log` when given.
pub fn forward_range(
    model: &ModelGraph,
    x: &Tensor,
    range: Range<usize>,
    mut log: Option<&mut ExecLog>,
) -> Result<Tensor> {
    if range.start > range.end || range.end > model.len() {
        return Err(Error::invalid(format!("layer range {range:?} invalid for a {}-layer model", model.len())));
    }
    check_stage_input(model, x, range.start)?;
    let mut cur = x.clone();
    for i in range {
        cur = model.layers()[i].forward(&cur)?;
        if let Some(log) = log.as_deref_mut() {
            log.push(i);
        }
    }
    Ok(cur)
}

fn check_stage_input(model: &ModelGraph, x: &Tensor, layer: usize) -> Result<()> {
    let want = model.shape_before(layer);
    if x.ndim() != want.len() + 1 || x.shape()[1..] != want[..] {
        return Err(Error::shape(
            "stage input",
            format!("layer {layer} expects [N, {want:?}], got {:?}", x.shape()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Step {
    /// Run the model layer unchanged.
    Layer(usize),
    /// Conv restricted to surviving input and output channels.
    Conv { layer: usize, weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    /// Dense layer reading only the surviving flattened features.
    Dense { layer: usize, weight: Tensor },
}

/// A subgraph compiled for execution: dropped filters are never computed.
///
/// Retained conv kernels (rows for kept filters, columns for kept input
/// channels) are gathered once into compact tensors, and the first dense layer
/// after the pruned convolutions reads only the features of surviving channels.
/// Layers before the split run unchanged.
#[derive(Clone, Debug)]
pub struct MaskedPlan {
    split_layer: usize,
    steps: Vec<Step>,
}

fn gather_conv(weight: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let s = weight.shape();
    let (c_in, kk) = (s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(rows.len() * cols.len() * kk);
    for &r in rows {
        for &c in cols {
            let base = (r * c_in + c) * kk;
            data.extend_from_slice(&weight.data()[base..base + kk]);
        }
    }
    Tensor::new(vec![rows.len(), cols.len(), s[2], s[3]], data).expect("gathered shape is consistent")
}

fn gather_dense_cols(weight: &Tensor, cols: &[usize]) -> Tensor {
    let [o, d] = *weight.shape() else { unreachable!("dense weights are 2-D") };
    let mut data = Vec::with_capacity(o * cols.len());
    for row in weight.data().chunks_exact(d) {
        data.extend(cols.iter().map(|&c| row[c]));
    }
    Tensor::new(vec![o, cols.len()], data).expect("gathered shape is consistent")
}

impl MaskedPlan {
    pub fn new(model: &ModelGraph, annotation: &SubgraphAnnotation) -> Result<Self> {
        annotation.validate(model)?;
        let m = annotation.split_layer;
        let mut steps = Vec::new();
        // Surviving channel indices of the running activation; None means all.
        let mut channels: Option<Vec<usize>> = None;
        let mut features: Option<Vec<usize>> = None;
        for l in m..model.len() {
            let layer = &model.layers()[l];
            match &layer.kind {
                LayerKind::Conv2d { weight, bias, stride, padding } => {
                    let all_in: Vec<usize>;
                    let cols = match &channels {
                        Some(c) => c.as_slice(),
                        None => {
                            all_in = (0..weight.shape()[1]).collect();
                            &all_in
                        }
                    };
                    let rows: Vec<usize> = match annotation.retained.get(&l) {
                        Some(r) => r.clone(),
                        None => (0..weight.shape()[0]).collect(),
                    };
                    let compact_bias = Tensor::from_vec(rows.iter().map(|&r| bias.data()[r]).collect());
                    steps.push(Step::Conv {
                        layer: l,
                        weight: gather_conv(weight, &rows, cols),
                        bias: compact_bias,
                        stride: *stride,
                        padding: *padding,
                    });
                    channels = if rows.len() == weight.shape()[0] && !annotation.retained.contains_key(&l) {
                        None
                    } else {
                        Some(rows)
                    };
                }
                LayerKind::Flatten => {
                    if let Some(ch) = channels.take() {
                        let before = model.shape_before(l);
                        let spatial: usize = before[1..].iter().product();
                        features = Some(ch.iter().flat_map(|&c| c * spatial..(c + 1) * spatial).collect());
                    }
                    steps.push(Step::Layer(l));
                }
                LayerKind::Dense { weight, .. } => match features.take() {
                    Some(cols) => steps.push(Step::Dense { layer: l, weight: gather_dense_cols(weight, &cols) }),
                    None => steps.push(Step::Layer(l)),
                },
                _ => steps.push(Step::Layer(l)),
            }
        }
        Ok(MaskedPlan { split_layer: m, steps })
    }

    pub fn split_layer(&self) -> usize {
        self.split_layer
    }

    /// Continues from the split layer, given the activations entering it.
    pub fn run_from_split(&self, model: &ModelGraph, features: &Tensor, mut log: Option<&mut ExecLog>) -> Result<Tensor> {
        check_stage_input(model, features, self.split_layer)?;
        let mut x = features.clone();
        for step in &self.steps {
            let l = match step {
                Step::Layer(l) => {
                    x = model.layers()[*l].forward(&x)?;
                    *l
                }
                Step::Conv { layer, weight, bias, stride, padding } => {
                    x = tensor::conv2d(&x, weight, bias, *stride, *padding)?;
                    *layer
                }
                Step::Dense { layer, weight } => {
                    let LayerKind::Dense { bias, .. } = &model.layers()[*layer].kind else {
                        unreachable!("plan step built from a dense layer")
                    };
                    x = tensor::dense(&x, weight, bias)?;
                    *layer
                }
            };
            if let Some(log) = log.as_deref_mut() {
                log.push(l);
            }
        }
        Ok(x)
    }

    /// Runs the shared prefix in full, then the compiled subgraph.
    pub fn run(&self, model: &ModelGraph, batch: &Tensor) -> Result<Tensor> {
        model.check_batch(batch)?;
        let cfe = forward_range(model, batch, 0..self.split_layer, None)?;
        self.run_from_split(model, &cfe, None)
    }
}

/// Executes `model` on `batch` with every filter outside `annotation` skipped
/// from the split layer onward.
pub fn forward_masked(model: &ModelGraph, batch: &Tensor, annotation: &SubgraphAnnotation) -> Result<Tensor> {
    MaskedPlan::new(model, annotation)?.run(model, batch)
}

/// Like [`forward_masked`] but starting from precomputed activations entering
/// the split layer (the shared prefix output).
pub fn forward_masked_from_split(
    model: &ModelGraph,
    features: &Tensor,
    annotation: &SubgraphAnnotation,
) -> Result<Tensor> {
    MaskedPlan::new(model, annotation)?.run_from_split(model, features, None)
}
