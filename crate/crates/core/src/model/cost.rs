use super::{LayerKind, ModelGraph, SubgraphAnnotation};
use crate::error::Result;

#[derive(Default)]
struct Cost {
    macs: u64,
    params: u64,
    per_layer: Vec<u64>,
}

/// Walks the model tracking how many channels (and flattened features) survive
/// the annotation, charging each conv and dense layer for what it computes.
fn walk(model: &ModelGraph, annotation: Option<&SubgraphAnnotation>) -> Result<Cost> {
    if let Some(a) = annotation {
        a.validate(model)?;
    }
    let mut cost = Cost::default();
    let mut channels = model.input_shape()[0];
    let mut features: Option<usize> = None;
    for (l, layer) in model.layers().iter().enumerate() {
        let before = cost.macs;
        match &layer.kind {
            LayerKind::Conv2d { weight, .. } => {
                let s = weight.shape();
                let kept = annotation.and_then(|a| a.retained.get(&l)).map_or(s[0], Vec::len);
                let out = model.shape_after(l);
                let (kh, kw) = (s[2] as u64, s[3] as u64);
                cost.macs += kept as u64 * channels as u64 * kh * kw * (out[1] * out[2]) as u64;
                cost.params += kept as u64 * channels as u64 * kh * kw + kept as u64;
                channels = kept;
            }
            LayerKind::Flatten => {
                let before = model.shape_before(l);
                let spatial: usize = before[1..].iter().product();
                features = Some(channels * spatial);
            }
            LayerKind::Dense { weight, .. } => {
                let [o, d] = *weight.shape() else { unreachable!("dense weights are 2-D") };
                let d_in = features.take().unwrap_or(d);
                cost.macs += (o * d_in) as u64;
                cost.params += (o * d_in + o) as u64;
            }
            _ => {}
        }
        cost.per_layer.push(cost.macs - before);
    }
    Ok(cost)
}

/// Multiply-accumulate count of one forward pass for a single input.
pub fn mac_count(model: &ModelGraph, annotation: Option<&SubgraphAnnotation>) -> Result<u64> {
    Ok(walk(model, annotation)?.macs)
}

/// Multiply-accumulate count of each layer, indexed like the model's layers.
pub fn layer_macs(model: &ModelGraph, annotation: Option<&SubgraphAnnotation>) -> Result<Vec<u64>> {
    Ok(walk(model, annotation)?.per_layer)
}

/// Weights and biases the (sub)graph actually reads.
pub fn param_count(model: &ModelGraph, annotation: Option<&SubgraphAnnotation>) -> Result<u64> {
    Ok(walk(model, annotation)?.params)
}
