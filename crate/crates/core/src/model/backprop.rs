use std::collections::BTreeMap;

use super::{LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Every intermediate value of one forward pass: `values[0]` is the batch,
/// `values[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    values: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("cache holds at least the input")
    }

    pub fn layer_input(&self, l: usize) -> &Tensor {
        &self.values[l]
    }

    pub fn layer_output(&self, l: usize) -> &Tensor {
        &self.values[l + 1]
    }
}

pub fn forward_cached(model: &ModelGraph, batch: &Tensor) -> Result<ForwardCache> {
    model.check_batch(batch)?;
    let mut values = Vec::with_capacity(model.len() + 1);
    values.push(batch.clone());
    for layer in model.layers() {
        let next = layer.forward(values.last().expect("non-empty"))?;
        values.push(next);
    }
    Ok(ForwardCache { values })
}

/// What a [`backward`] pass should produce.
#[derive(Clone, Debug, Default)]
pub struct BackwardRequest {
    /// Collect weight and bias gradients of every parameterised layer visited.
    pub param_grads: bool,
    /// Layers whose output gradient should be kept.
    pub output_grads: Vec<usize>,
    /// Lowest layer to propagate through (inclusive).
    pub stop_at: usize,
    /// Layer whose output `grad_output` refers to; the last layer when `None`.
    pub top: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    /// Layer index -> (weight gradient, bias gradient), summed over the batch.
    pub params: BTreeMap<usize, (Tensor, Tensor)>,
    /// Layer index -> loss gradient at that layer's output.
    pub outputs: BTreeMap<usize, Tensor>,
}

/// Backpropagates `grad_output` (loss gradient at the model output) through the
/// layers of `cache`, from the last one down to `request.stop_at`.
pub fn backward(model: &ModelGraph, cache: &ForwardCache, grad_output: &Tensor, request: &BackwardRequest) -> Result<Gradients> {
    if cache.values.len() != model.len() + 1 {
        return Err(Error::invalid("forward cache does not belong to this model"));
    }
    let top = request.top.unwrap_or(model.len() - 1);
    if top >= model.len() {
        return Err(Error::invalid(format!("backward from layer {top} in a {}-layer model", model.len())));
    }
    if grad_output.shape() != cache.layer_output(top).shape() {
        return Err(Error::shape(
            "backward",
            format!("gradient {:?} vs output of layer {top} {:?}", grad_output.shape(), cache.layer_output(top).shape()),
        ));
    }
    let mut out = Gradients::default();
    let mut g = grad_output.clone();
    for i in (request.stop_at..=top).rev() {
        if request.output_grads.contains(&i) {
            out.outputs.insert(i, g.clone());
        }
        let x = cache.layer_input(i);
        g = match &model.layers()[i].kind {
            LayerKind::Conv2d { weight, stride, padding, .. } => {
                let gr = tensor::conv2d_backward(&g, x, weight, *stride, *padding)?;
                if request.param_grads {
                    out.params.insert(i, (gr.weight, gr.bias));
                }
                gr.input
            }
            LayerKind::Dense { weight, .. } => {
                let gr = tensor::dense_backward(&g, x, weight)?;
                if request.param_grads {
                    out.params.insert(i, (gr.weight, gr.bias));
                }
                gr.input
            }
            LayerKind::Relu => tensor::relu_backward(&g, x)?,
            LayerKind::MaxPool2 => tensor::maxpool2_backward(&g, x)?,
            LayerKind::AdaptiveAvgPool { .. } => tensor::adaptive_avg_pool_backward(&g, x.shape())?,
            LayerKind::Flatten => g.reshape(x.shape())?,
            LayerKind::Softmax => tensor::softmax_backward(&g, cache.layer_output(i))?,
        };
    }
    // The gradient now sits at the input of `stop_at`, i.e. the output of the layer below.
    if request.stop_at > 0 && request.output_grads.contains(&(request.stop_at - 1)) {
        out.outputs.insert(request.stop_at - 1, g);
    }
    Ok(out)
}
