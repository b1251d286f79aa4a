//! Sequential models: layer list, shape inference, execution (full and
//! filter-masked), backpropagation, analytic cost, and on-disk formats.

mod annotation;
mod backprop;
mod builder;
mod cost;
mod data;
mod eval;
mod exec;
pub mod io;

pub use annotation::{ClusterId, SubgraphAnnotation, ANNOTATION_FORMAT_VERSION};
pub use backprop::{backward, forward_cached, BackwardRequest, ForwardCache, Gradients};
pub use builder::ModelBuilder;
pub use cost::{layer_macs, mac_count, param_count};
pub use data::{Cluster, ClusterMap, Dataset, Split};
pub use eval::{accuracy_of, argmax_rows, argmax_rows_within, predict_logits, EVAL_BATCH};
pub use exec::{forward_full, forward_masked, forward_masked_from_split, forward_range, ExecLog, MaskedPlan};

use crate::error::{Error, Result};
use crate::tensor::{self, conv2d_output_size, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv2d { weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    Relu,
    MaxPool2,
    Dense { weight: Tensor, bias: Tensor },
    Flatten,
    AdaptiveAvgPool { out_size: usize },
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Flatten => "flatten",
            LayerKind::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. })
    }

    /// Weight and bias tensors, for layers that carry parameters.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match &self.kind {
            LayerKind::Conv2d { weight, bias, .. } | LayerKind::Dense { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match &mut self.kind {
            LayerKind::Conv2d { weight, bias, .. } | LayerKind::Dense { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| {
            Error::shape("layer", format!("layer '{}' ({}) {what}; input {input:?}", self.name, self.kind_name()))
        };
        match (&self.kind, input) {
            (LayerKind::Conv2d { weight, bias, stride, padding }, &[c, h, w]) => {
                let ws = weight.shape();
                if ws.len() != 4 || ws[1] != c || bias.shape() != [ws[0]] {
                    return Err(bad(&format!("has weights {ws:?} / bias {:?}", bias.shape())));
                }
                let oh = conv2d_output_size(h, ws[2], *stride, *padding).ok_or_else(|| bad("kernel does not fit"))?;
                let ow = conv2d_output_size(w, ws[3], *stride, *padding).ok_or_else(|| bad("kernel does not fit"))?;
                Ok(vec![ws[0], oh, ow])
            }
            (LayerKind::Relu, _) => Ok(input.to_vec()),
            (LayerKind::MaxPool2, &[c, h, w]) if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
            (LayerKind::AdaptiveAvgPool { out_size }, &[c, h, w]) if *out_size >= 1 && *out_size <= h.min(w) => {
                Ok(vec![c, *out_size, *out_size])
            }
            (LayerKind::Flatten, _) => Ok(vec![input.iter().product()]),
            (LayerKind::Dense { weight, bias }, &[d]) => {
                let ws = weight.shape();
                if ws.len() != 2 || ws[1] != d || bias.shape() != [ws[0]] {
                    return Err(bad(&format!("has weights {ws:?} / bias {:?}", bias.shape())));
                }
                Ok(vec![ws[0]])
            }
            (LayerKind::Softmax, &[c]) => Ok(vec![c]),
            _ => Err(bad("cannot consume this input")),
        }
    }

    /// Applies the layer to a batch `[N, ...]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Conv2d { weight, bias, stride, padding } => tensor::conv2d(x, weight, bias, *stride, *padding),
            LayerKind::Relu => Ok(tensor::relu(x)),
            LayerKind::MaxPool2 => tensor::maxpool2(x),
            LayerKind::AdaptiveAvgPool { out_size } => tensor::adaptive_avg_pool(x, *out_size),
            LayerKind::Flatten => {
                let n = x.outer_len();
                let d = x.len() / n.max(1);
                x.clone().reshape(&[n, d])
            }
            LayerKind::Dense { weight, bias } => tensor::dense(x, weight, bias),
            LayerKind::Softmax => tensor::softmax(x),
        }
    }
}

/// An ordered, shape-checked list of layers ending in `num_classes` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
    shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(Error::invalid(format!("model input must be a non-empty [C,H,W], got {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for layer in &layers {
            cur = layer.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        if cur != [num_classes] {
            return Err(Error::invalid(format!(
                "last layer produces {cur:?} but the model declares {num_classes} classes"
            )));
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::invalid(format!("{} class names for {num_classes} classes", names.len())));
            }
        }
        Ok(ModelGraph { input_shape, layers, num_classes, class_names, shapes })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Replaces weights in place. Shapes must stay unchanged.
    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Per-sample shape entering layer `l` (`l == len()` gives the logits shape).
    pub fn shape_before(&self, l: usize) -> &[usize] {
        if l == 0 {
            &self.input_shape
        } else {
            &self.shapes[l - 1]
        }
    }

    /// Per-sample shape produced by layer `l`.
    pub fn shape_after(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_conv()).map(|(i, _)| i).collect()
    }

    pub fn last_conv(&self) -> Option<usize> {
        self.layers.iter().rposition(LayerSpec::is_conv)
    }

    /// Output channels of conv layer `l`.
    pub fn conv_out_channels(&self, l: usize) -> Result<usize> {
        match self.layers.get(l).map(|x| &x.kind) {
            Some(LayerKind::Conv2d { weight, .. }) => Ok(weight.shape()[0]),
            _ => Err(Error::invalid(format!("layer {l} is not a conv2d layer"))),
        }
    }

    /// Index whose output is the post-activation map of conv layer `l`: the
    /// directly following ReLU when there is one, otherwise `l` itself.
    pub fn activation_layer(&self, l: usize) -> Result<usize> {
        self.conv_out_channels(l)?;
        match self.layers.get(l + 1).map(|x| &x.kind) {
            Some(LayerKind::Relu) => Ok(l + 1),
            _ => Ok(l),
        }
    }

    /// Checks that `batch` is `[N, C, H, W]` matching the model input.
    pub fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "model input",
                format!("expected [N, {:?}], got {s:?}", self.input_shape),
            ));
        }
        Ok(s[0])
    }
}
