//! Split-layer selection, the cluster route predictor, and routed inference.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtPath, Error, Result};
use crate::extract::prefix_activations;
use crate::model::{
    self, accuracy_of, argmax_rows, layer_macs, mac_count, ClusterId, ClusterMap, Dataset, ExecLog, MaskedPlan,
    ModelBuilder, ModelGraph, SubgraphAnnotation,
};
use crate::probe::{fit_probe, probe_accuracy, train_on_tensors, EpochStats, FeatureMatrix, TrainConfig};
use crate::tensor::{self, Tensor};

/// Result of searching for the earliest usable split layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSelection {
    #[serde(rename = "split_layer_M")]
    pub layer: usize,
    pub target_accuracy: f64,
    /// Held-out probe accuracy per candidate conv layer, shallow to deep.
    pub candidates: Vec<(usize, f64)>,
    /// Set when no candidate reached the target and the deepest conv layer was returned.
    pub warning: Option<String>,
}

/// Pooled activations entering `layer`, targets over all classes.
fn prefix_features(
    model: &ModelGraph,
    layer: usize,
    data: &Dataset,
    classes: &[usize],
    k_prime: usize,
) -> Result<FeatureMatrix> {
    let a = prefix_activations(model, data.images(), layer)?;
    let s = model.shape_before(layer);
    if s.len() != 3 || k_prime == 0 || k_prime > s[1].min(s[2]) {
        return Err(Error::invalid(format!("k' = {k_prime} does not fit the {s:?} activation entering layer {layer}")));
    }
    let pooled = tensor::adaptive_avg_pool(&a, k_prime)?;
    let n = data.len();
    let dim = s[0] * k_prime * k_prime;
    // Labels unseen in training get an index past the probe's outputs and so always count as wrong.
    let targets = data.labels().iter().map(|l| classes.binary_search(l).unwrap_or(classes.len())).collect();
    Ok(FeatureMatrix {
        rows: pooled.reshape(&[n, dim])?,
        targets,
        classes: classes.to_vec(),
        k_prime,
        source_layer: layer,
    })
}

/// Finds the earliest conv layer whose incoming activation supports a linear
/// probe reaching `target_accuracy` on `held_out` over the full class set.
pub fn select_split_layer(
    model: &ModelGraph,
    train: &Dataset,
    held_out: &Dataset,
    target_accuracy: f64,
    k_prime: usize,
    probe: &TrainConfig,
) -> Result<SplitSelection> {
    let convs = model.conv_layers();
    let Some(&deepest) = convs.last() else {
        return Err(Error::invalid("model has no conv layers"));
    };
    train.check_labels(model.num_classes())?;
    held_out.check_labels(model.num_classes())?;
    let classes = train.classes_present();
    let mut candidates = Vec::new();
    for &l in &convs {
        let fit = fit_probe(&prefix_features(model, l, train, &classes, k_prime)?, probe)?;
        let acc = probe_accuracy(&fit.probe, &prefix_features(model, l, held_out, &classes, k_prime)?)?;
        log::info!("split candidate {l}: held-out probe accuracy {acc:.4}");
        candidates.push((l, acc));
        if acc >= target_accuracy {
            return Ok(SplitSelection { layer: l, target_accuracy, candidates, warning: None });
        }
    }
    let warning = format!("no conv layer reached {target_accuracy}; using the deepest conv layer {deepest}");
    log::warn!("{warning}");
    Ok(SplitSelection { layer: deepest, target_accuracy, candidates, warning: Some(warning) })
}

/// Cluster classifier reading the activation entering the split layer.
#[derive(Clone, Debug)]
pub struct SrpClassifier {
    pub model: ModelGraph,
    pub split_layer: usize,
    /// Cluster id of each output position.
    pub cluster_ids: Vec<usize>,
}

/// Two 3x3 convs (C and C/2 channels), 2x2 adaptive average pooling, then
/// dense layers of 128, 64 and `clusters` units with a final softmax.
pub fn build_srp(input_shape: &[usize], clusters: usize, seed: u64) -> Result<ModelGraph> {
    if clusters < 2 {
        return Err(Error::invalid(format!("route predictor needs at least two clusters, got {clusters}")));
    }
    let [c, h, w] = *input_shape else {
        return Err(Error::shape("build_srp", format!("input {input_shape:?} is not [C, H, W]")));
    };
    if h < 2 || w < 2 {
        return Err(Error::shape("build_srp", format!("input {input_shape:?} is smaller than 2x2")));
    }
    ModelBuilder::new(input_shape, seed)
        .conv2d("srp_conv1", c, 3, 1, 1)
        .relu()
        .conv2d("srp_conv2", (c / 2).max(1), 3, 1, 1)
        .relu()
        .adaptive_avg_pool(2)
        .flatten()
        .dense("srp_fc1", 128)
        .relu()
        .dense("srp_fc2", 64)
        .relu()
        .dense("srp_fc3", clusters)
        .softmax()
        .class_names((0..clusters).map(|k| format!("cluster{k}")).collect())
        .build()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrpReport {
    pub held_out_accuracy: f64,
    pub trace: Vec<EpochStats>,
}

/// Trains a route predictor on frozen prefix activations of `model`. The base
/// model is only read.
pub fn train_srp(
    model: &ModelGraph,
    split_layer: usize,
    train: &Dataset,
    held_out: &Dataset,
    clusters: &ClusterMap,
    config: &TrainConfig,
) -> Result<(SrpClassifier, SrpReport)> {
    clusters.validate(model.num_classes())?;
    if clusters.len() < 2 {
        return Err(Error::invalid("route predictor needs at least two clusters"));
    }
    if split_layer == 0 || split_layer >= model.len() {
        return Err(Error::invalid(format!("split layer {split_layer} leaves no prefix or no remainder")));
    }
    let to_cluster = clusters.class_to_cluster(model.num_classes());
    let net = build_srp(model.shape_before(split_layer), clusters.len(), config.seed)?;
    let inputs = prefix_activations(model, train.images(), split_layer)?;
    let targets: Vec<usize> = train.labels().iter().map(|&l| to_cluster[l]).collect();
    let trained = train_on_tensors(&net, &inputs, &targets, config)?;
    let srp = SrpClassifier {
        model: trained.model,
        split_layer,
        cluster_ids: clusters.clusters.iter().map(|c| c.id).collect(),
    };
    let feats = prefix_activations(model, held_out.images(), split_layer)?;
    let probs = srp.probabilities(&feats)?;
    let want: Vec<usize> = held_out.labels().iter().map(|&l| to_cluster[l]).collect();
    let held_out_accuracy = accuracy_of(&argmax_rows(&probs), &want);
    Ok((srp, SrpReport { held_out_accuracy, trace: trained.trace }))
}

impl SrpClassifier {
    pub fn num_clusters(&self) -> usize {
        self.cluster_ids.len()
    }

    /// Cluster probabilities `[N, K]` for prefix activations `[N, C, H, W]`.
    pub fn probabilities(&self, features: &Tensor) -> Result<Tensor> {
        model::predict_logits(&self.model, features)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        model::io::save_model(&self.model, dir)?;
        let meta = SrpMeta { split_layer: self.split_layer, cluster_ids: self.cluster_ids.clone() };
        std::fs::write(dir.join("srp.json"), serde_json::to_string_pretty(&meta)?).at(&dir.join("srp.json"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let model = model::io::load_model(dir)?;
        let meta: SrpMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("srp.json")).at(&dir.join("srp.json"))?)?;
        if meta.cluster_ids.len() != model.num_classes() {
            return Err(Error::format("srp", format!("{} cluster ids for {} outputs", meta.cluster_ids.len(), model.num_classes())));
        }
        Ok(SrpClassifier { model, split_layer: meta.split_layer, cluster_ids: meta.cluster_ids })
    }
}

#[derive(Serialize, Deserialize)]
struct SrpMeta {
    #[serde(rename = "split_layer_M")]
    split_layer: usize,
    cluster_ids: Vec<usize>,
}

/// Gap between the largest and second-largest probability.
pub fn confidence(probabilities: &[f32]) -> Result<f64> {
    if probabilities.len() < 2 {
        return Err(Error::invalid("confidence needs at least two clusters"));
    }
    let sum: f64 = probabilities.iter().map(|&p| f64::from(p)).sum();
    if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!("not a probability vector (sum {sum})")));
    }
    let (mut hi, mut second) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &p in probabilities {
        if p > hi {
            second = hi;
            hi = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(f64::from(hi) - f64::from(second))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub alpha: f64,
}

impl RoutingConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha = {alpha} outside [0, 1]")));
        }
        Ok(RoutingConfig { alpha })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutePath {
    Subgraph(usize),
    Full,
}

impl std::fmt::Display for RoutePath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoutePath::Subgraph(c) => write!(f, "subgraph:{c}"),
            RoutePath::Full => f.write_str("FULL"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub predicted_cluster: usize,
    pub confidence: f64,
    pub routed: bool,
    pub path: RoutePath,
}

/// Prediction for one input with the record of what ran.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: usize,
    pub logits: Vec<f32>,
    pub decision: RoutingDecision,
    /// Base-model layer indices executed, in order.
    pub layers_run: ExecLog,
    /// Multiply-accumulates spent per stage.
    pub stage_macs: StageMacs,
    /// Total multiply-accumulates: prefix + predictor + chosen path.
    pub macs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageMacs {
    pub prefix: u64,
    pub predictor: u64,
    pub path: u64,
}

/// Dispatches inputs to cluster subgraphs behind a shared prefix.
#[derive(Clone, Debug)]
pub struct Router {
    model: ModelGraph,
    srp: SrpClassifier,
    plans: BTreeMap<usize, (MaskedPlan, u64)>,
    full_plan: (MaskedPlan, u64),
    prefix_macs: u64,
    srp_macs: u64,
    config: RoutingConfig,
}

impl Router {
    /// `annotations` are the accepted subgraphs; clusters without one always
    /// fall back to the full model.
    pub fn new(
        model: ModelGraph,
        srp: SrpClassifier,
        annotations: &[SubgraphAnnotation],
        config: RoutingConfig,
    ) -> Result<Self> {
        RoutingConfig::new(config.alpha)?;
        let m = srp.split_layer;
        if m == 0 || m >= model.len() || srp.model.input_shape() != model.shape_before(m) {
            return Err(Error::invalid(format!("route predictor does not fit split layer {m} of the model")));
        }
        let per_layer = layer_macs(&model, None)?;
        let prefix_macs = per_layer[..m].iter().sum();
        let tail = |a: Option<&SubgraphAnnotation>| -> Result<u64> { Ok(layer_macs(&model, a)?[m..].iter().sum()) };
        let mut plans = BTreeMap::new();
        for a in annotations {
            let ClusterId::Cluster(c) = a.cluster_id else {
                return Err(Error::invalid("routing needs per-cluster annotations, not a global one"));
            };
            if a.split_layer != m {
                return Err(Error::invalid(format!(
                    "annotation for cluster {c} splits at {} but the route predictor at {m}",
                    a.split_layer
                )));
            }
            if !srp.cluster_ids.contains(&c) {
                return Err(Error::invalid(format!("annotation for unknown cluster {c}")));
            }
            if plans.insert(c, (MaskedPlan::new(&model, a)?, tail(Some(a))?)).is_some() {
                return Err(Error::invalid(format!("two annotations for cluster {c}")));
            }
        }
        let full = SubgraphAnnotation::full(&model, ClusterId::All, m)?;
        let full_plan = (MaskedPlan::new(&model, &full)?, tail(None)?);
        let srp_macs = mac_count(&srp.model, None)?;
        Ok(Router { model, srp, plans, full_plan, prefix_macs, srp_macs, config })
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn srp(&self) -> &SrpClassifier {
        &self.srp
    }

    pub fn config(&self) -> RoutingConfig {
        self.config
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        self.config = RoutingConfig::new(alpha)?;
        Ok(())
    }

    pub fn split_layer(&self) -> usize {
        self.srp.split_layer
    }

    pub fn has_subgraph(&self, cluster: usize) -> bool {
        self.plans.contains_key(&cluster)
    }

    /// MACs of the full model, for comparison with routed inference.
    pub fn full_macs(&self) -> u64 {
        self.prefix_macs + self.full_plan.1
    }

    /// Logits of `path` for prefix activations `[N, C, H, W]`.
    pub fn run_path(&self, path: RoutePath, features: &Tensor) -> Result<Tensor> {
        let (plan, _) = self.plan_for(path)?;
        plan.run_from_split(&self.model, features, None)
    }

    /// MACs per input along `path`, prefix and route predictor included.
    pub fn path_macs(&self, path: RoutePath) -> Result<u64> {
        Ok(self.prefix_macs + self.srp_macs + self.plan_for(path)?.1)
    }

    fn plan_for(&self, path: RoutePath) -> Result<&(MaskedPlan, u64)> {
        match path {
            RoutePath::Full => Ok(&self.full_plan),
            RoutePath::Subgraph(c) => {
                self.plans.get(&c).ok_or_else(|| Error::invalid(format!("no subgraph for cluster {c}")))
            }
        }
    }

    /// Routes one image `[C, H, W]` (or a batch of one).
    pub fn infer(&self, image: &Tensor) -> Result<Inference> {
        let batch = match image.ndim() {
            3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
            _ => image.clone(),
        };
        if batch.outer_len() != 1 {
            return Err(Error::shape("infer", format!("expected one image, got {:?}", image.shape())));
        }
        Ok(self.infer_batch(&batch)?.remove(0))
    }

    /// Routes every image of `[N, C, H, W]`. The prefix runs once per input;
    /// each input then continues through its chosen path.
    pub fn infer_batch(&self, images: &Tensor) -> Result<Vec<Inference>> {
        let (features, decisions) = self.decide(images)?;
        let m = self.split_layer();
        let mut out = Vec::with_capacity(decisions.len());
        for (i, d) in decisions.iter().enumerate() {
            let (plan, tail_macs) = self.plan_for(d.path)?;
            let mut layers_run: ExecLog = (0..m).collect();
            let logits = plan.run_from_split(&self.model, &features.select_outer(&[i])?, Some(&mut layers_run))?;
            out.push(Inference {
                prediction: Tensor::argmax(logits.data()),
                logits: logits.into_data(),
                decision: d.clone(),
                layers_run,
                stage_macs: StageMacs { prefix: self.prefix_macs, predictor: self.srp_macs, path: *tail_macs },
                macs: self.prefix_macs + self.srp_macs + tail_macs,
            });
        }
        Ok(out)
    }

    /// Prefix activations and routing decisions without running any path.
    pub fn decide(&self, images: &Tensor) -> Result<(Tensor, Vec<RoutingDecision>)> {
        self.model.check_batch(images)?;
        let features = prefix_activations(&self.model, images, self.split_layer())?;
        let probs = self.srp.probabilities(&features)?;
        let k = self.srp.num_clusters();
        let mut decisions = Vec::with_capacity(images.outer_len());
        for row in probs.data().chunks_exact(k) {
            decisions.push(self.decision_for(row)?);
        }
        Ok((features, decisions))
    }

    fn decision_for(&self, probs: &[f32]) -> Result<RoutingDecision> {
        let conf = confidence(probs)?;
        let predicted_cluster = self.srp.cluster_ids[Tensor::argmax(probs)];
        let routed = conf > self.config.alpha && self.plans.contains_key(&predicted_cluster);
        let path = if routed { RoutePath::Subgraph(predicted_cluster) } else { RoutePath::Full };
        Ok(RoutingDecision { predicted_cluster, confidence: conf, routed, path })
    }
}

/// Writes one CSV row per routed input. The true-cluster column is left
/// empty without a cluster map.
pub fn write_routing_trace(
    w: impl Write,
    results: &[Inference],
    labels: &[usize],
    clusters: Option<&ClusterMap>,
    alpha: f64,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "sample",
        "alpha",
        "label",
        "true_cluster",
        "predicted_cluster",
        "confidence",
        "routed",
        "path",
        "prediction",
        "prefix_macs",
        "predictor_macs",
        "path_macs",
        "macs",
    ])?;
    for (i, (r, &l)) in results.iter().zip(labels).enumerate() {
        let true_cluster = clusters.and_then(|m| m.cluster_of(l)).map(|c| c.to_string()).unwrap_or_default();
        csv.write_record([
            i.to_string(),
            alpha.to_string(),
            l.to_string(),
            true_cluster,
            r.decision.predicted_cluster.to_string(),
            format!("{:.9}", r.decision.confidence),
            r.decision.routed.to_string(),
            r.decision.path.to_string(),
            r.prediction.to_string(),
            r.stage_macs.prefix.to_string(),
            r.stage_macs.predictor.to_string(),
            r.stage_macs.path.to_string(),
            r.macs.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
