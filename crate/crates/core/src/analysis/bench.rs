use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::extract::kept_count;
use crate::model::{
    accuracy_of, argmax_rows, mac_count, predict_logits, ClusterId, Dataset, MaskedPlan, ModelGraph, SubgraphAnnotation,
};
use crate::router::{RoutePath, Router};
use crate::tensor::Tensor;

/// Wall-clock statistics of repeated runs, in seconds per input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub repetitions: usize,
}

impl LatencyStats {
    /// Runs `f` `warmup` times untimed, then `repetitions` timed runs; each
    /// run processes `items` inputs.
    pub fn measure(warmup: usize, repetitions: usize, items: usize, mut f: impl FnMut() -> Result<()>) -> Result<Self> {
        if repetitions == 0 || items == 0 {
            return Err(Error::invalid("latency measurement needs at least one repetition and one input"));
        }
        for _ in 0..warmup {
            f()?;
        }
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            f()?;
            times.push(t.elapsed().as_secs_f64() / items as f64);
        }
        Ok(Self::from_samples(times))
    }

    pub fn from_samples(mut times: Vec<f64>) -> Self {
        times.sort_by(f64::total_cmp);
        let n = times.len();
        let median = if n % 2 == 1 { times[n / 2] } else { (times[n / 2 - 1] + times[n / 2]) / 2.0 };
        LatencyStats { median, mean: times.iter().sum::<f64>() / n as f64, min: times[0], max: times[n - 1], repetitions: n }
    }
}

/// Spearman rank correlation, with tied values given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equally long series of at least two values"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Empirical CDF of `values` at each of `points`: fraction of values `<= x`.
pub fn confidence_cdf(values: &[f64], points: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    points.iter().map(|&x| (x, sorted.partition_point(|&v| v <= x) as f64 / n)).collect()
}

/// Everything needed to recompute any threshold's outcome for one input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RouteTrace {
    pub sample: usize,
    pub label: usize,
    pub predicted_cluster: usize,
    pub confidence: f64,
    pub full_prediction: usize,
    pub full_macs: u64,
    /// Prediction and cost of the predicted cluster's subgraph, when it has one.
    pub subgraph_prediction: Option<usize>,
    pub subgraph_macs: Option<u64>,
}

impl RouteTrace {
    pub fn routed(&self, alpha: f64) -> bool {
        self.subgraph_prediction.is_some() && self.confidence > alpha
    }

    pub fn prediction(&self, alpha: f64) -> usize {
        match self.subgraph_prediction {
            Some(p) if self.confidence > alpha => p,
            _ => self.full_prediction,
        }
    }

    pub fn macs(&self, alpha: f64) -> u64 {
        match self.subgraph_macs {
            Some(m) if self.confidence > alpha => m,
            _ => self.full_macs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRecord {
    pub scenario: String,
    pub alpha: Option<f64>,
    pub accuracy: f64,
    pub routed_fraction: f64,
    pub latency_median_s: f64,
    pub latency_mean_s: f64,
    pub latency_min_s: f64,
    pub latency_max_s: f64,
    pub repetitions: usize,
    /// Mean multiply-accumulates per input.
    pub mac_count: f64,
}

impl BenchmarkRecord {
    fn new(scenario: String, alpha: Option<f64>, accuracy: f64, routed_fraction: f64, macs: f64, l: &LatencyStats) -> Self {
        BenchmarkRecord {
            scenario,
            alpha,
            accuracy,
            routed_fraction,
            latency_median_s: l.median,
            latency_mean_s: l.mean,
            latency_min_s: l.min,
            latency_max_s: l.max,
            repetitions: l.repetitions,
            mac_count: macs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdReport {
    /// The unrouted base model first, then one record per alpha.
    pub records: Vec<BenchmarkRecord>,
    /// Empirical confidence CDF at each alpha.
    pub cdf: Vec<(f64, f64)>,
    pub traces: Vec<RouteTrace>,
}

impl ThresholdReport {
    pub fn write_records(&self, w: impl Write) -> Result<()> {
        write_rows(w, &self.records)
    }

    pub fn write_traces(&self, w: impl Write) -> Result<()> {
        write_rows(w, &self.traces)
    }

    pub fn write_cdf(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["confidence", "cdf"])?;
        for (x, f) in &self.cdf {
            csv.write_record([x.to_string(), f.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn write_rows<T: Serialize>(w: impl Write, rows: &[T]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

/// Accuracy, routed fraction and cost of `router` on `dataset` for each alpha,
/// with latency timed on the first `latency_samples` inputs.
pub fn threshold_sweep(
    router: &Router,
    alphas: &[f64],
    dataset: &Dataset,
    repetitions: usize,
    warmup: usize,
    latency_samples: usize,
) -> Result<ThresholdReport> {
    if alphas.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::invalid(format!("alpha {a} outside [0, 1]")));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("benchmark dataset is empty"));
    }
    let model = router.model();
    let traces = route_traces(router, dataset)?;
    let n = traces.len() as f64;
    let timed: Vec<usize> = (0..latency_samples.clamp(1, dataset.len())).collect();
    let timed_images = dataset.images().select_outer(&timed)?;

    let base_logits = predict_logits(model, dataset.images())?;
    let base_acc = accuracy_of(&argmax_rows(&base_logits), dataset.labels());
    let base_lat = LatencyStats::measure(warmup, repetitions, timed.len(), || {
        predict_logits(model, &timed_images).map(|_| ())
    })?;
    let mut records =
        vec![BenchmarkRecord::new("base".into(), None, base_acc, 0.0, mac_count(model, None)? as f64, &base_lat)];

    let mut r = router.clone();
    for &alpha in alphas {
        r.set_alpha(alpha)?;
        let hits = traces.iter().filter(|t| t.prediction(alpha) == t.label).count();
        let routed = traces.iter().filter(|t| t.routed(alpha)).count();
        let macs = traces.iter().map(|t| t.macs(alpha) as f64).sum::<f64>() / n;
        let lat = LatencyStats::measure(warmup, repetitions, timed.len(), || r.infer_batch(&timed_images).map(|_| ()))?;
        records.push(BenchmarkRecord::new(
            format!("alpha={alpha}"),
            Some(alpha),
            hits as f64 / n,
            routed as f64 / n,
            macs,
            &lat,
        ));
    }
    let confidences: Vec<f64> = traces.iter().map(|t| t.confidence).collect();
    Ok(ThresholdReport { records, cdf: confidence_cdf(&confidences, alphas), traces })
}

/// Per-input routing outcomes along both possible paths.
pub fn route_traces(router: &Router, dataset: &Dataset) -> Result<Vec<RouteTrace>> {
    let (features, decisions) = router.decide(dataset.images())?;
    let full = argmax_rows(&router.run_path(RoutePath::Full, &features)?);
    let full_macs = router.path_macs(RoutePath::Full)?;
    let mut traces = Vec::with_capacity(decisions.len());
    for (i, d) in decisions.iter().enumerate() {
        let path = RoutePath::Subgraph(d.predicted_cluster);
        let (sub, sub_macs) = if router.has_subgraph(d.predicted_cluster) {
            let logits = router.run_path(path, &features.select_outer(&[i])?)?;
            (Some(Tensor::argmax(logits.data())), Some(router.path_macs(path)?))
        } else {
            (None, None)
        };
        traces.push(RouteTrace {
            sample: i,
            label: dataset.labels()[i],
            predicted_cluster: d.predicted_cluster,
            confidence: d.confidence,
            full_prediction: full[i],
            full_macs,
            subgraph_prediction: sub,
            subgraph_macs: sub_macs,
        });
    }
    Ok(traces)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetentionLatency {
    pub retention: f64,
    pub mac_count: u64,
    pub latency: LatencyStats,
}

/// Times masked execution at uniform per-layer retention levels from
/// `split_layer` on. Which filters are kept does not affect cost, so the
/// lowest indices are used.
pub fn latency_vs_retention(
    model: &ModelGraph,
    split_layer: usize,
    levels: &[f64],
    images: &Tensor,
    repetitions: usize,
    warmup: usize,
) -> Result<Vec<RetentionLatency>> {
    let n = model.check_batch(images)?;
    let mut out = Vec::with_capacity(levels.len());
    for &r in levels {
        let mut a = SubgraphAnnotation::full(model, ClusterId::All, split_layer)?;
        for (l, kept) in a.retained.iter_mut() {
            kept.truncate(kept_count(r, model.conv_out_channels(*l)?));
        }
        a.r_last = r;
        a.r_split = r;
        let plan = MaskedPlan::new(model, &a)?;
        let latency = LatencyStats::measure(warmup, repetitions, n, || plan.run(model, images).map(|_| ()))?;
        out.push(RetentionLatency { retention: r, mac_count: mac_count(model, Some(&a))?, latency });
    }
    Ok(out)
}
