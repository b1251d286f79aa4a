//! Per-filter importance scores for one convolutional layer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtPath, Error, Result};
use crate::model::{backward, forward_cached, BackwardRequest, ClusterId, Dataset, LayerKind, ModelGraph, EVAL_BATCH};
use crate::probe::{collect_features, fit_probe, ProbeModel, TrainConfig};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Dcs,
    Taylor,
    Apoz,
    Sensitivity,
    L1,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 6] =
        [Criterion::Dcs, Criterion::Taylor, Criterion::Apoz, Criterion::Sensitivity, Criterion::L1, Criterion::Random];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Dcs => "dcs",
            Criterion::Taylor => "taylor",
            Criterion::Apoz => "apoz",
            Criterion::Sensitivity => "sensitivity",
            Criterion::L1 => "l1",
            Criterion::Random => "random",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown criterion '{s}'")))
    }
}

/// One score per filter of a conv layer; higher means more important.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub criterion: Criterion,
    #[serde(rename = "layer")]
    pub layer_index: usize,
    #[serde(rename = "cluster")]
    pub cluster_id: Option<ClusterId>,
    pub k_prime: Option<usize>,
    pub seed: Option<u64>,
    pub scores: Vec<f64>,
}

impl ScoreTable {
    fn new(criterion: Criterion, layer_index: usize, scores: Vec<f64>) -> Self {
        ScoreTable { criterion, layer_index, cluster_id: None, k_prime: None, seed: None, scores }
    }

    pub fn with_cluster(mut self, id: ClusterId) -> Self {
        self.cluster_id = Some(id);
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Filter indices from most to least important; ties go to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_descending(&self.scores)
    }

    /// The `keep` most important filters, sorted ascending.
    pub fn top(&self, keep: usize) -> Vec<usize> {
        let mut kept: Vec<usize> = self.ranking().into_iter().take(keep).collect();
        kept.sort_unstable();
        kept
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()?).at(path.as_ref())?;
        Ok(())
    }
}

/// Indices sorted by decreasing score, stable on ties.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Discriminative capability of each filter from a trained probe.
///
/// The importance matrix is `W* ⊙ ∇W`; each feature column is summarised by
/// its Euclidean norm across target rows, and a filter's score is the square
/// root of the summed column norms of its `k'^2` features.
pub fn dcs_scores(probe: &ProbeModel, mean_gradient: &Tensor, k_prime: usize, c_out: usize) -> Result<ScoreTable> {
    let (t, d) = (probe.num_targets(), probe.feature_dim());
    if mean_gradient.shape() != probe.weights.shape() {
        return Err(Error::shape(
            "dcs_scores",
            format!("gradient {:?} vs weights {:?}", mean_gradient.shape(), probe.weights.shape()),
        ));
    }
    let per = k_prime * k_prime;
    if k_prime == 0 || d != c_out * per {
        return Err(Error::shape("dcs_scores", format!("feature dim {d} != {c_out} filters x {k_prime}^2")));
    }
    let w = probe.weights.data();
    let g = mean_gradient.data();
    let mut col_norm = vec![0f64; d];
    for r in 0..t {
        for (j, norm) in col_norm.iter_mut().enumerate() {
            let v = f64::from(w[r * d + j]) * f64::from(g[r * d + j]);
            *norm += v * v;
        }
    }
    let scores = col_norm.chunks_exact(per).map(|c| c.iter().map(|s| s.sqrt()).sum::<f64>().sqrt()).collect();
    let mut table = ScoreTable::new(Criterion::Dcs, 0, scores);
    table.k_prime = Some(k_prime);
    Ok(table)
}

/// Collects features, fits a probe and scores layer `layer` on `subset`.
pub fn dcs_for_layer(
    model: &ModelGraph,
    layer: usize,
    subset: &Dataset,
    k_prime: usize,
    config: &TrainConfig,
) -> Result<ScoreTable> {
    let c_out = model.conv_out_channels(layer)?;
    let features = collect_features(model, layer, subset, k_prime)?;
    let fit = fit_probe(&features, config)?;
    let mut table = dcs_scores(&fit.probe, &fit.mean_gradient, k_prime, c_out)?;
    table.layer_index = layer;
    table.seed = Some(config.seed);
    Ok(table)
}

/// Post-activation maps of conv `layer` and the loss gradient with respect to
/// them, batch by batch. The loss is all-class cross-entropy on true labels.
fn for_each_activation_grad(
    model: &ModelGraph,
    layer: usize,
    subset: &Dataset,
    mut f: impl FnMut(&Tensor, &Tensor),
) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::invalid("scoring needs a non-empty dataset"));
    }
    subset.check_labels(model.num_classes())?;
    let act = model.activation_layer(layer)?;
    let top = match model.layers().last().map(|l| &l.kind) {
        Some(LayerKind::Softmax) => model.len() - 2,
        _ => model.len() - 1,
    };
    let request = BackwardRequest { param_grads: false, output_grads: vec![act], stop_at: act + 1, top: Some(top) };
    for start in (0..subset.len()).step_by(EVAL_BATCH) {
        let (batch, labels) = subset.batch(start, start + EVAL_BATCH);
        let cache = forward_cached(model, &batch)?;
        let (_, grad) = tensor::cross_entropy_batch(cache.layer_output(top), labels)?;
        // The batch loss is a mean; rescale so every sample carries its own gradient.
        let grad = scale(grad, labels.len() as f32);
        let grads = backward(model, &cache, &grad, &request)?;
        f(cache.layer_output(act), &grads.outputs[&act]);
    }
    Ok(())
}

fn scale(mut t: Tensor, by: f32) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= by);
    t
}

fn per_filter<F: FnMut(usize, &[f32], &[f32])>(a: &Tensor, g: &Tensor, mut f: F) {
    let s = a.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            f(ch, &a.data()[off..off + hw], &g.data()[off..off + hw]);
        }
    }
}

/// First-order Taylor importance: mean over samples of `|Σ_xy a · ∂L/∂a|`.
pub fn taylor_scores(model: &ModelGraph, layer: usize, subset: &Dataset) -> Result<ScoreTable> {
    let c = model.conv_out_channels(layer)?;
    let mut sums = vec![0f64; c];
    for_each_activation_grad(model, layer, subset, |a, g| {
        per_filter(a, g, |ch, av, gv| {
            let s: f64 = av.iter().zip(gv).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
            sums[ch] += s.abs();
        })
    })?;
    let n = subset.len() as f64;
    Ok(ScoreTable::new(Criterion::Taylor, layer, sums.into_iter().map(|s| s / n).collect()))
}

/// Mean absolute loss gradient over every activation of each filter.
pub fn sensitivity_scores(model: &ModelGraph, layer: usize, subset: &Dataset) -> Result<ScoreTable> {
    let c = model.conv_out_channels(layer)?;
    let mut sums = vec![0f64; c];
    let mut count = 0usize;
    for_each_activation_grad(model, layer, subset, |a, g| {
        count += a.shape()[0] * a.shape()[2] * a.shape()[3];
        per_filter(a, g, |ch, _, gv| sums[ch] += gv.iter().map(|v| f64::from(v.abs())).sum::<f64>())
    })?;
    Ok(ScoreTable::new(Criterion::Sensitivity, layer, sums.into_iter().map(|s| s / count as f64).collect()))
}

/// One minus the average fraction of zero post-activation entries.
pub fn apoz_scores(model: &ModelGraph, layer: usize, subset: &Dataset) -> Result<ScoreTable> {
    if subset.is_empty() {
        return Err(Error::invalid("scoring needs a non-empty dataset"));
    }
    let c = model.conv_out_channels(layer)?;
    let act = model.activation_layer(layer)?;
    let mut zeros = vec![0usize; c];
    let mut total = 0usize;
    for start in (0..subset.len()).step_by(EVAL_BATCH) {
        let (batch, _) = subset.batch(start, start + EVAL_BATCH);
        let a = crate::model::forward_range(model, &batch, 0..act + 1, None)?;
        total += a.shape()[0] * a.shape()[2] * a.shape()[3];
        per_filter(&a, &a, |ch, av, _| zeros[ch] += av.iter().filter(|v| **v <= 0.0).count());
    }
    Ok(ScoreTable::new(Criterion::Apoz, layer, zeros.into_iter().map(|z| 1.0 - z as f64 / total as f64).collect()))
}

/// Sum of absolute kernel weights per filter.
pub fn l1_scores(model: &ModelGraph, layer: usize) -> Result<ScoreTable> {
    let c = model.conv_out_channels(layer)?;
    let (weight, _) = model.layers()[layer].params().expect("conv layer has parameters");
    let per = weight.len() / c;
    let scores = weight.data().chunks_exact(per).map(|k| k.iter().map(|w| f64::from(w.abs())).sum()).collect();
    Ok(ScoreTable::new(Criterion::L1, layer, scores))
}

/// Uniform random scores; a baseline ranking.
pub fn random_scores(model: &ModelGraph, layer: usize, seed: u64) -> Result<ScoreTable> {
    let c = model.conv_out_channels(layer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut table = ScoreTable::new(Criterion::Random, layer, (0..c).map(|_| rng.random::<f64>()).collect());
    table.seed = Some(seed);
    Ok(table)
}

/// Settings shared by every criterion when scoring a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub criterion: Criterion,
    pub k_prime: usize,
    pub probe: TrainConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { criterion: Criterion::Dcs, k_prime: 2, probe: TrainConfig::default() }
    }
}

/// Scores conv `layer` on `subset` with the configured criterion.
pub fn score_layer(model: &ModelGraph, layer: usize, subset: &Dataset, config: &ScoringConfig) -> Result<ScoreTable> {
    match config.criterion {
        Criterion::Dcs => dcs_for_layer(model, layer, subset, config.k_prime, &config.probe),
        Criterion::Taylor => taylor_scores(model, layer, subset),
        Criterion::Apoz => apoz_scores(model, layer, subset),
        Criterion::Sensitivity => sensitivity_scores(model, layer, subset),
        Criterion::L1 => l1_scores(model, layer),
        Criterion::Random => random_scores(model, layer, config.probe.seed),
    }
}
