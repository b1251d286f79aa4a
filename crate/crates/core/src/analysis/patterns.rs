use crate::error::{Error, Result};
use crate::model::{forward_range, Dataset, ModelGraph, EVAL_BATCH};

/// Fraction of a filter's observed range its mean activation must exceed to
/// count as firing.
pub const DEFAULT_ACTIVATION_QUANTILE: f64 = 0.7;

/// `ceil(0.2 * num_classes)`: the number of classes each filter is tagged with.
pub fn default_top_k(num_classes: usize) -> usize {
    (num_classes as f64 * 0.2).ceil().max(1.0) as usize
}

/// Spatial mean of every filter's post-activation map, `[N][C_out]`.
fn filter_means(model: &ModelGraph, layer: usize, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let act = model.activation_layer(layer)?;
    let mut out = Vec::with_capacity(dataset.len());
    for start in (0..dataset.len()).step_by(EVAL_BATCH) {
        let (batch, _) = dataset.batch(start, start + EVAL_BATCH);
        let a = forward_range(model, &batch, 0..act + 1, None)?;
        let s = a.shape();
        let hw = s[2] * s[3];
        for sample in a.data().chunks_exact(s[1] * hw) {
            out.push(sample.chunks_exact(hw).map(|m| m.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64).collect());
        }
    }
    Ok(out)
}

fn require_class(dataset: &Dataset, class: usize) -> Result<()> {
    if dataset.labels().contains(&class) {
        Ok(())
    } else {
        Err(Error::invalid(format!("class {class} has no samples in the dataset")))
    }
}

/// Mean activation of each filter over the samples of `class`, min-max scaled
/// across filters. A constant pattern maps to 0.5 everywhere.
pub fn activation_pattern(model: &ModelGraph, layer: usize, class: usize, dataset: &Dataset) -> Result<Vec<f64>> {
    require_class(dataset, class)?;
    let members = dataset.filter_classes(&[class]);
    let means = filter_means(model, layer, &members)?;
    let c = means[0].len();
    let avg: Vec<f64> =
        (0..c).map(|f| means.iter().map(|m| m[f]).sum::<f64>() / means.len() as f64).collect();
    let lo = avg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = avg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(vec![0.5; c]);
    }
    Ok(avg.into_iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Which classes each filter of a layer responds to most often.
#[derive(Clone, Debug, PartialEq)]
pub struct SharingProfile {
    pub layer: usize,
    /// `[filter][class]` fraction of that class's samples on which the filter fires.
    pub frequency: Vec<Vec<f64>>,
    /// Classes each filter is tagged with, ascending.
    pub tags: Vec<Vec<usize>>,
}

impl SharingProfile {
    /// A filter fires on a sample when its mean activation exceeds
    /// `min + quantile * (max - min)` of its own range over `dataset`; each
    /// filter is then tagged with the `top_k` classes it fires for most often.
    pub fn compute(model: &ModelGraph, layer: usize, dataset: &Dataset, quantile: f64, top_k: usize) -> Result<Self> {
        let k = model.num_classes();
        if top_k == 0 || top_k >= k {
            return Err(Error::invalid(format!("top_k = {top_k} must be in 1..{k}")));
        }
        if !(0.0..=1.0).contains(&quantile) {
            return Err(Error::invalid(format!("activation quantile {quantile} outside [0, 1]")));
        }
        if dataset.is_empty() {
            return Err(Error::invalid("filter sharing needs a non-empty dataset"));
        }
        dataset.check_labels(k)?;
        let means = filter_means(model, layer, dataset)?;
        let c = means[0].len();
        let mut per_class = vec![0usize; k];
        for &l in dataset.labels() {
            per_class[l] += 1;
        }
        let mut frequency = vec![vec![0f64; k]; c];
        for (f, freq) in frequency.iter_mut().enumerate() {
            let lo = means.iter().map(|m| m[f]).fold(f64::INFINITY, f64::min);
            let hi = means.iter().map(|m| m[f]).fold(f64::NEG_INFINITY, f64::max);
            let threshold = lo + quantile * (hi - lo);
            for (m, &l) in means.iter().zip(dataset.labels()) {
                if m[f] > threshold {
                    freq[l] += 1.0;
                }
            }
            for (v, &n) in freq.iter_mut().zip(&per_class) {
                *v = if n == 0 { 0.0 } else { *v / n as f64 };
            }
        }
        let tags = frequency
            .iter()
            .map(|freq| {
                let mut order: Vec<usize> = (0..k).filter(|&c| freq[c] > 0.0).collect();
                order.sort_by(|&a, &b| freq[b].total_cmp(&freq[a]).then(a.cmp(&b)));
                order.truncate(top_k);
                order.sort_unstable();
                order
            })
            .collect();
        Ok(SharingProfile { layer, frequency, tags })
    }

    /// Filters tagged with both classes over filters tagged with either; 1 for
    /// identical classes and 0 when neither class tags any filter.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 1.0;
        }
        let (mut both, mut either) = (0usize, 0usize);
        for t in &self.tags {
            let (ha, hb) = (t.binary_search(&a).is_ok(), t.binary_search(&b).is_ok());
            both += usize::from(ha && hb);
            either += usize::from(ha || hb);
        }
        if either == 0 {
            0.0
        } else {
            both as f64 / either as f64
        }
    }
}

/// Filter-sharing similarity of two classes at `layer`.
pub fn filter_sharing(
    model: &ModelGraph,
    layer: usize,
    class_a: usize,
    class_b: usize,
    dataset: &Dataset,
    quantile: f64,
    top_k: usize,
) -> Result<f64> {
    require_class(dataset, class_a)?;
    require_class(dataset, class_b)?;
    Ok(SharingProfile::compute(model, layer, dataset, quantile, top_k)?.similarity(class_a, class_b))
}
