//! Subgraph extraction: per-layer retention schedules, ranking filters by an
//! importance criterion, accuracy-gated acceptance and grid sweeps.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtPath, Error, Result};
use crate::model::{
    accuracy_of, argmax_rows, argmax_rows_within, forward_range, mac_count, ClusterId, ClusterMap, Dataset,
    MaskedPlan, ModelGraph, SubgraphAnnotation, ANNOTATION_FORMAT_VERSION, EVAL_BATCH,
};
use crate::probe::TrainConfig;
use crate::scoring::{score_layer, Criterion, ScoreTable, ScoringConfig};
use crate::tensor::Tensor;

/// Default accuracy margin, in fraction units (two accuracy points).
pub const DEFAULT_EPSILON: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    #[serde(rename = "r_L")]
    pub r_last: f64,
    #[serde(rename = "r_M")]
    pub r_split: f64,
    pub tau_acc: f64,
    pub epsilon: f64,
    #[serde(rename = "split_layer_M")]
    pub split_layer: usize,
    pub criterion: Criterion,
    pub k_prime: usize,
    pub probe: TrainConfig,
}

impl ExtractionConfig {
    pub fn new(split_layer: usize) -> Self {
        ExtractionConfig {
            r_last: 1.0,
            r_split: 1.0,
            tau_acc: 0.0,
            epsilon: DEFAULT_EPSILON,
            split_layer,
            criterion: Criterion::Dcs,
            k_prime: 2,
            probe: TrainConfig::default(),
        }
    }

    pub fn with_retention(mut self, r_last: f64, r_split: f64) -> Self {
        self.r_last = r_last;
        self.r_split = r_split;
        self
    }

    /// Sets `tau_acc` to `mean_base_accuracy - epsilon`.
    pub fn with_derived_tau(mut self, mean_base_accuracy: f64) -> Self {
        self.tau_acc = derive_tau(mean_base_accuracy, self.epsilon);
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction("r_L", self.r_last)?;
        check_fraction("r_M", self.r_split)?;
        if !(self.tau_acc >= 0.0 && self.tau_acc.is_finite()) {
            return Err(Error::invalid(format!("tau_acc = {} must be a non-negative fraction", self.tau_acc)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid(format!("epsilon = {} must be non-negative", self.epsilon)));
        }
        if self.k_prime == 0 {
            return Err(Error::invalid("k' must be positive"));
        }
        self.probe.validate()
    }

    fn scoring(&self) -> ScoringConfig {
        ScoringConfig { criterion: self.criterion, k_prime: self.k_prime, probe: self.probe.clone() }
    }
}

/// Accuracy threshold implied by a mean base accuracy and a margin, floored at 0.
pub fn derive_tau(mean_base_accuracy: f64, epsilon: f64) -> f64 {
    (mean_base_accuracy - epsilon).max(0.0)
}

fn check_fraction(name: &str, r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {r} outside (0, 1]")))
    }
}

/// Linear interpolation of the retention rate from `r_split` at layer
/// `m_index` to `r_last` at layer `l_index`, for every index in between.
/// Values are clamped to (0, 1].
pub fn retention_schedule(l_index: usize, m_index: usize, r_last: f64, r_split: f64) -> Result<BTreeMap<usize, f64>> {
    check_fraction("r_L", r_last)?;
    check_fraction("r_M", r_split)?;
    if m_index > l_index {
        return Err(Error::invalid(format!("split layer {m_index} is after the last layer {l_index}")));
    }
    if m_index == l_index {
        return Ok(BTreeMap::from([(l_index, r_last)]));
    }
    let span = (l_index - m_index) as f64;
    Ok((m_index..=l_index)
        .map(|l| {
            let r = match l {
                _ if l == m_index => r_split,
                _ if l == l_index => r_last,
                _ => r_split + (l - m_index) as f64 * (r_last - r_split) / span,
            };
            (l, r.clamp(f64::MIN_POSITIVE, 1.0))
        })
        .collect())
}

/// Retention rate of each prunable conv layer of `model` from `split_layer` to
/// its last conv layer.
pub fn model_schedule(model: &ModelGraph, split_layer: usize, r_last: f64, r_split: f64) -> Result<BTreeMap<usize, f64>> {
    let last = model.last_conv().ok_or_else(|| Error::invalid("model has no conv layers"))?;
    if split_layer >= model.len() {
        return Err(Error::invalid(format!("split layer {split_layer} outside a {}-layer model", model.len())));
    }
    if split_layer > last {
        return Err(Error::invalid(format!("split layer {split_layer} is after the last conv layer {last}")));
    }
    let schedule = retention_schedule(last, split_layer, r_last, r_split)?;
    Ok(model.conv_layers().into_iter().filter(|&l| l >= split_layer).map(|l| (l, schedule[&l])).collect())
}

/// Filters kept out of `c_out` at retention `r`: `ceil(r * c_out)`, at least one.
pub fn kept_count(r: f64, c_out: usize) -> usize {
    ((r * c_out as f64 - 1e-9).ceil() as usize).clamp(1, c_out.max(1))
}

/// Held-out samples of one cluster, with the activations entering the split
/// layer computed once.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub split_layer: usize,
}

impl EvalSet {
    pub fn new(model: &ModelGraph, dataset: &Dataset, split_layer: usize) -> Result<Self> {
        if split_layer >= model.len() {
            return Err(Error::invalid(format!("split layer {split_layer} outside a {}-layer model", model.len())));
        }
        dataset.check_labels(model.num_classes())?;
        let features = prefix_activations(model, dataset.images(), split_layer)?;
        Ok(EvalSet { features, labels: dataset.labels().to_vec(), split_layer })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Activations entering `split_layer` for every image, in evaluation-sized chunks.
pub fn prefix_activations(model: &ModelGraph, images: &Tensor, split_layer: usize) -> Result<Tensor> {
    model.check_batch(images)?;
    let n = images.outer_len();
    let mut out = Vec::new();
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        out.push(forward_range(model, &images.select_outer(&idx)?, 0..split_layer, None)?);
    }
    if out.is_empty() {
        let mut shape = vec![0];
        shape.extend_from_slice(model.shape_before(split_layer));
        return Tensor::new(shape, Vec::new());
    }
    concat_outer(&out)
}

fn concat_outer(parts: &[Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(Tensor::outer_len).sum();
    Tensor::new(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

/// All-class logits of `plan` over an evaluation set.
pub fn subgraph_logits(model: &ModelGraph, plan: &MaskedPlan, eval: &EvalSet) -> Result<Tensor> {
    let n = eval.len();
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        parts.push(plan.run_from_split(model, &eval.features.select_outer(&idx)?, None)?);
    }
    if parts.is_empty() {
        return Tensor::new(vec![0, model.num_classes()], Vec::new());
    }
    concat_outer(&parts)
}

/// Top-1 accuracy over all classes and restricted to `classes`.
pub fn subgraph_accuracy(
    model: &ModelGraph,
    annotation: &SubgraphAnnotation,
    eval: &EvalSet,
    classes: &[usize],
) -> Result<(f64, f64)> {
    if annotation.split_layer != eval.split_layer {
        return Err(Error::invalid(format!(
            "annotation split layer {} but evaluation features enter layer {}",
            annotation.split_layer, eval.split_layer
        )));
    }
    let plan = MaskedPlan::new(model, annotation)?;
    let logits = subgraph_logits(model, &plan, eval)?;
    let all = accuracy_of(&argmax_rows(&logits), &eval.labels);
    let restricted = if classes.is_empty() { all } else { accuracy_of(&argmax_rows_within(&logits, classes), &eval.labels) };
    Ok((all, restricted))
}

/// Score tables keyed by (cluster, layer, criterion, seed).
#[derive(Clone, Debug, Default)]
pub struct ScoreCache {
    tables: HashMap<(ClusterId, usize, Criterion, u64), ScoreTable>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn get_or_score(
        &mut self,
        model: &ModelGraph,
        cluster: ClusterId,
        layer: usize,
        data: &Dataset,
        config: &ScoringConfig,
    ) -> Result<&ScoreTable> {
        let key = (cluster, layer, config.criterion, config.probe.seed);
        if let Entry::Vacant(slot) = self.tables.entry(key) {
            slot.insert(score_layer(model, layer, data, config)?.with_cluster(cluster));
        }
        Ok(&self.tables[&key])
    }

    pub fn tables(&self) -> impl Iterator<Item = &ScoreTable> {
        self.tables.values()
    }
}

/// Outcome of extracting one cluster's subgraph.
#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub annotation: SubgraphAnnotation,
    /// Top-1 accuracy with the argmax over all classes.
    pub accuracy: f64,
    /// Top-1 accuracy with the argmax restricted to the cluster's classes.
    pub restricted_accuracy: f64,
    pub mac_count: u64,
    pub accepted: bool,
}

/// Builds the annotation for given retention rates from cached scores.
pub fn annotate(
    model: &ModelGraph,
    cluster: ClusterId,
    score_set: &Dataset,
    config: &ExtractionConfig,
    cache: &mut ScoreCache,
) -> Result<SubgraphAnnotation> {
    config.validate()?;
    if score_set.is_empty() {
        return Err(Error::invalid(format!("cluster {cluster} has no scoring samples")));
    }
    let schedule = model_schedule(model, config.split_layer, config.r_last, config.r_split)?;
    let scoring = config.scoring();
    let mut retained = BTreeMap::new();
    for (&layer, &r) in &schedule {
        let c_out = model.conv_out_channels(layer)?;
        let table = cache.get_or_score(model, cluster, layer, score_set, &scoring)?;
        retained.insert(layer, table.top(kept_count(r, c_out)));
    }
    let annotation = SubgraphAnnotation {
        format_version: ANNOTATION_FORMAT_VERSION,
        cluster_id: cluster,
        split_layer: config.split_layer,
        r_last: config.r_last,
        r_split: config.r_split,
        recorded_accuracy: 0.0,
        retained,
    };
    annotation.validate(model)?;
    Ok(annotation)
}

/// Ranks filters on `score_set`, keeps the scheduled number per layer and
/// measures the subgraph on `eval`. The annotation is returned whether or not
/// it reaches `config.tau_acc`.
pub fn extract_subgraph(
    model: &ModelGraph,
    cluster: ClusterId,
    classes: &[usize],
    score_set: &Dataset,
    eval: &EvalSet,
    config: &ExtractionConfig,
    cache: &mut ScoreCache,
) -> Result<Extraction> {
    if eval.is_empty() {
        return Err(Error::invalid(format!("cluster {cluster} has no evaluation samples")));
    }
    let mut annotation = annotate(model, cluster, score_set, config, cache)?;
    let (accuracy, restricted_accuracy) = subgraph_accuracy(model, &annotation, eval, classes)?;
    annotation.recorded_accuracy = accuracy;
    let mac_count = mac_count(model, Some(&annotation))?;
    Ok(Extraction { annotation, accuracy, restricted_accuracy, mac_count, accepted: accuracy >= config.tau_acc })
}

/// Retention pairs to try.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(rename = "r_L")]
    pub r_last: Vec<f64>,
    #[serde(rename = "r_M")]
    pub r_split: Vec<f64>,
}

impl Default for SweepGrid {
    /// r_L from 0.9 down to 0.1 in steps of 0.1; r_M from 0.10 down to 0.02 in steps of 0.02.
    fn default() -> Self {
        SweepGrid {
            r_last: (1..=9).rev().map(|i| i as f64 / 10.0).collect(),
            r_split: (1..=5).rev().map(|i| i as f64 * 0.02).collect(),
        }
    }
}

impl SweepGrid {
    /// The default grid with r_M read as the fraction pruned at the split
    /// layer, so the retention there is 0.90 to 0.98.
    pub fn complemented() -> Self {
        let base = SweepGrid::default();
        SweepGrid { r_last: base.r_last, r_split: base.r_split.iter().map(|r| ((1.0 - r) * 100.0).round() / 100.0).collect() }
    }

    pub fn single(r_last: f64, r_split: f64) -> Self {
        SweepGrid { r_last: vec![r_last], r_split: vec![r_split] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_last.is_empty() || self.r_split.is_empty() {
            return Err(Error::invalid("sweep grid is empty"));
        }
        for &r in &self.r_last {
            check_fraction("r_L", r)?;
        }
        for &r in &self.r_split {
            check_fraction("r_M", r)?;
        }
        Ok(())
    }

    /// (r_L, r_M) pairs, r_L-major in the listed order.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.r_last.iter().flat_map(|&l| self.r_split.iter().map(move |&m| (l, m))).collect()
    }
}

/// Per-cluster inputs to a sweep.
#[derive(Clone, Debug)]
pub struct ClusterData {
    pub cluster: ClusterId,
    pub classes: Vec<usize>,
    pub score_set: Dataset,
    pub eval: EvalSet,
    /// Accuracy of the unpruned model on `eval`.
    pub base_accuracy: f64,
}

impl ClusterData {
    /// Splits `score_source` and `eval_source` by the clusters of `map`.
    pub fn for_clusters(
        model: &ModelGraph,
        map: &ClusterMap,
        score_source: &Dataset,
        eval_source: &Dataset,
        split_layer: usize,
    ) -> Result<Vec<ClusterData>> {
        map.validate(model.num_classes())?;
        let mut out = Vec::with_capacity(map.len());
        for c in &map.clusters {
            let score_set = score_source.filter_classes(&c.classes);
            let eval_data = eval_source.filter_classes(&c.classes);
            if score_set.is_empty() || eval_data.is_empty() {
                return Err(Error::invalid(format!("cluster {} has no samples in one of the splits", c.id)));
            }
            let eval = EvalSet::new(model, &eval_data, split_layer)?;
            let full = SubgraphAnnotation::full(model, ClusterId::Cluster(c.id), split_layer)?;
            let (base_accuracy, _) = subgraph_accuracy(model, &full, &eval, &c.classes)?;
            out.push(ClusterData { cluster: ClusterId::Cluster(c.id), classes: c.classes.clone(), score_set, eval, base_accuracy });
        }
        Ok(out)
    }
}

/// Every cluster's extraction at one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub r_last: f64,
    pub r_split: f64,
    pub extractions: Vec<Extraction>,
    pub avg_accuracy: f64,
    pub avg_mac_count: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub tau_acc: f64,
    pub epsilon: f64,
    pub points: Vec<SweepPoint>,
    /// Index of the accepted point with the lowest average MAC count.
    pub best: Option<usize>,
    /// Indices of points not dominated in (accuracy up, MACs down), by increasing cost.
    pub pareto: Vec<usize>,
}

impl SweepResult {
    pub fn accepted(&self) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(|p| p.accepted)
    }

    pub fn best_point(&self) -> Option<&SweepPoint> {
        self.best.map(|i| &self.points[i])
    }

    /// Annotations of the best point whose own cluster accuracy stays within
    /// `epsilon` of that cluster's base accuracy.
    pub fn routable_annotations(&self, clusters: &[ClusterData]) -> Vec<SubgraphAnnotation> {
        let Some(best) = self.best_point() else { return Vec::new() };
        best.extractions
            .iter()
            .zip(clusters)
            .filter(|(e, c)| e.accuracy >= c.base_accuracy - self.epsilon)
            .map(|(e, _)| e.annotation.clone())
            .collect()
    }

    /// One row per (point, cluster): r_L, r_M, cluster_id, accuracy, mac_count, accepted.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["r_L", "r_M", "cluster_id", "accuracy", "mac_count", "accepted"])?;
        for p in &self.points {
            for e in &p.extractions {
                csv.write_record([
                    format!("{}", p.r_last),
                    format!("{}", p.r_split),
                    e.annotation.cluster_id.to_string(),
                    format!("{:.6}", e.accuracy),
                    e.mac_count.to_string(),
                    p.accepted.to_string(),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path.as_ref()).at(path.as_ref())?)
    }
}

/// Runs the extraction at every grid point for every cluster. A point is
/// accepted when the cluster-averaged accuracy reaches `config.tau_acc`.
pub fn sweep_extract(
    model: &ModelGraph,
    clusters: &[ClusterData],
    grid: &SweepGrid,
    config: &ExtractionConfig,
    cache: &mut ScoreCache,
) -> Result<SweepResult> {
    grid.validate()?;
    if clusters.is_empty() {
        return Err(Error::invalid("sweep needs at least one cluster"));
    }
    let mut points = Vec::new();
    for (r_last, r_split) in grid.points() {
        let cfg = config.clone().with_retention(r_last, r_split);
        let mut extractions = Vec::with_capacity(clusters.len());
        for c in clusters {
            extractions.push(extract_subgraph(model, c.cluster, &c.classes, &c.score_set, &c.eval, &cfg, cache)?);
        }
        let k = extractions.len() as f64;
        let avg_accuracy = extractions.iter().map(|e| e.accuracy).sum::<f64>() / k;
        let avg_mac_count = extractions.iter().map(|e| e.mac_count as f64).sum::<f64>() / k;
        log::info!("r_L {r_last} r_M {r_split}: accuracy {avg_accuracy:.4}, MACs {avg_mac_count:.0}");
        points.push(SweepPoint { r_last, r_split, extractions, avg_accuracy, avg_mac_count, accepted: avg_accuracy >= cfg.tau_acc });
    }
    let best = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.accepted)
        .min_by(|(_, a), (_, b)| a.avg_mac_count.total_cmp(&b.avg_mac_count).then(b.avg_accuracy.total_cmp(&a.avg_accuracy)))
        .map(|(i, _)| i);
    let pareto = pareto_front(&points.iter().map(|p| (p.avg_mac_count, p.avg_accuracy)).collect::<Vec<_>>());
    Ok(SweepResult { tau_acc: config.tau_acc, epsilon: config.epsilon, points, best, pareto })
}

/// Indices of (cost, accuracy) pairs that no other pair beats on both axes
/// (at least as good on each, strictly better on one), sorted by cost.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let dominated = |i: usize| {
        let (ci, ai) = points[i];
        points.iter().any(|&(c, a)| c <= ci && a >= ai && (c < ci || a > ai))
    };
    let mut front: Vec<usize> = (0..points.len()).filter(|&i| !dominated(i)).collect();
    front.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
    front
}

/// Prunes the whole model as one macro-cluster: filters are scored once on
/// all classes and kept per layer at the given retention rates. The split
/// layer is the smallest key of `retention`.
pub fn prune_global(
    model: &ModelGraph,
    dataset: &Dataset,
    retention: &BTreeMap<usize, f64>,
    scoring: &ScoringConfig,
) -> Result<SubgraphAnnotation> {
    let Some((&split, _)) = retention.iter().next() else {
        return Err(Error::invalid("retention map is empty"));
    };
    for (&l, &r) in retention {
        model.conv_out_channels(l)?;
        check_fraction(&format!("retention of layer {l}"), r)?;
    }
    let last = model.last_conv().expect("retention keys are conv layers");
    for l in model.conv_layers().into_iter().filter(|&l| l >= split && l <= last) {
        if !retention.contains_key(&l) {
            return Err(Error::invalid(format!("retention map misses prunable layer {l}")));
        }
    }
    if dataset.is_empty() {
        return Err(Error::invalid("global pruning needs a non-empty dataset"));
    }
    let mut retained = BTreeMap::new();
    for (&l, &r) in retention {
        let table = score_layer(model, l, dataset, scoring)?;
        retained.insert(l, table.top(kept_count(r, model.conv_out_channels(l)?)));
    }
    let annotation = SubgraphAnnotation {
        format_version: ANNOTATION_FORMAT_VERSION,
        cluster_id: ClusterId::All,
        split_layer: split,
        r_last: retention[&last],
        r_split: retention[&split],
        recorded_accuracy: 0.0,
        retained,
    };
    annotation.validate(model)?;
    Ok(annotation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kept_count_rounds_up_and_keeps_one() {
        assert_eq!(kept_count(0.3, 10), 3);
        assert_eq!(kept_count(0.31, 10), 4);
        assert_eq!(kept_count(0.01, 8), 1);
        assert_eq!(kept_count(1.0, 8), 8);
    }

    #[test]
    fn tau_floors_at_zero() {
        assert!((derive_tau(0.9, 0.02) - 0.88).abs() < 1e-12);
        assert_eq!(derive_tau(0.01, 0.02), 0.0);
    }

    #[test]
    fn grid_points_are_r_last_major() {
        let g = SweepGrid::default();
        assert_eq!(g.points().len(), 45);
        let (l, m) = g.points()[1];
        assert_eq!(l, 0.9);
        assert!((m - 0.08).abs() < 1e-12);
        assert_eq!(SweepGrid::complemented().r_split, vec![0.9, 0.92, 0.94, 0.96, 0.98]);
        assert!(SweepGrid { r_last: vec![], r_split: vec![0.5] }.validate().is_err());
        assert!(SweepGrid::single(0.5, 0.0).validate().is_err());
    }

    #[test]
    fn pareto_drops_dominated_points() {
        let pts = [(1.0, 0.5), (2.0, 0.6), (2.0, 0.4), (3.0, 0.6), (0.5, 0.2)];
        assert_eq!(pareto_front(&pts), vec![4, 0, 1]);
        assert!(pareto_front(&[]).is_empty());
    }

    #[test]
    fn config_rejects_bad_retention() {
        assert!(ExtractionConfig::new(3).with_retention(0.0, 0.5).validate().is_err());
        assert!(ExtractionConfig::new(3).with_retention(0.5, 1.2).validate().is_err());
        assert!(ExtractionConfig::new(3).with_retention(0.5, 0.9).validate().is_ok());
    }
}
