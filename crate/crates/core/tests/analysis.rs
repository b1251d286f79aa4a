mod common;

use std::sync::OnceLock;

use common::{tiny_train_config, tiny_trained};
use semroute::analysis::{
    activation_pattern, confidence_cdf, default_top_k, filter_sharing, latency_vs_retention, per_cluster_eval,
    route_traces, spearman, threshold_sweep, write_cluster_eval, write_features, LatencyStats, RouteTrace,
    SharingProfile,
};
use semroute::model::{
    forward_full, ClusterId, Dataset, LayerKind, LayerSpec, ModelGraph, Split, SubgraphAnnotation,
};
use semroute::probe::{collect_features, TrainConfig};
use semroute::router::{train_srp, Router, RoutingConfig, SrpClassifier};
use semroute::Tensor;

const SPLIT: usize = 5;

fn srp() -> &'static SrpClassifier {
    static CELL: OnceLock<SrpClassifier> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = tiny_trained();
        let cfg = TrainConfig { epochs: 10, ..tiny_train_config() };
        train_srp(&t.model, SPLIT, &t.bench.train, &t.bench.val, &t.bench.cluster_map, &cfg).unwrap().0
    })
}

fn half_annotation(cluster: usize) -> SubgraphAnnotation {
    let mut a = SubgraphAnnotation::full(&tiny_trained().model, ClusterId::Cluster(cluster), SPLIT).unwrap();
    for kept in a.retained.values_mut() {
        kept.truncate((kept.len() / 2).max(1));
    }
    a
}

fn router() -> Router {
    let t = tiny_trained();
    let annotations: Vec<_> = (0..3).map(half_annotation).collect();
    Router::new(t.model.clone(), srp().clone(), &annotations, RoutingConfig::new(0.5).unwrap()).unwrap()
}

/// 1x1 conv over two input channels, relu, flatten, dense to two classes.
fn pointwise_model(weight: [f32; 4], bias: [f32; 2]) -> ModelGraph {
    let layers = vec![
        LayerSpec::new(
            "c",
            LayerKind::Conv2d {
                weight: Tensor::new(vec![2, 2, 1, 1], weight.to_vec()).unwrap(),
                bias: Tensor::new(vec![2], bias.to_vec()).unwrap(),
                stride: 1,
                padding: 0,
            },
        ),
        LayerSpec::new("r", LayerKind::Relu),
        LayerSpec::new("f", LayerKind::Flatten),
        LayerSpec::new("d", LayerKind::Dense { weight: Tensor::full(&[2, 8], 0.1), bias: Tensor::zeros(&[2]) }),
    ];
    ModelGraph::new(vec![2, 2, 2], layers, 2, None).unwrap()
}

/// Class 0 lights channel 0, class 1 lights channel 1, with a little
/// per-sample variation.
fn two_channel_data(per_class: usize) -> Dataset {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2 {
        for i in 0..per_class {
            let v = 1.0 + 0.01 * i as f32;
            for ch in 0..2 {
                data.extend(std::iter::repeat_n(if ch == class { v } else { 0.0 }, 4));
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![2 * per_class, 2, 2, 2], data).unwrap(), labels, Split::Test).unwrap()
}

#[test]
fn constant_activations_give_a_flat_pattern() {
    let m = pointwise_model([0.0; 4], [0.3, 0.3]);
    assert_eq!(activation_pattern(&m, 0, 0, &two_channel_data(3)).unwrap(), vec![0.5, 0.5]);
}

#[test]
fn dominant_filter_maps_to_one() {
    let m = pointwise_model([0.0; 4], [2.0, 0.5]);
    assert_eq!(activation_pattern(&m, 0, 1, &two_channel_data(3)).unwrap(), vec![1.0, 0.0]);
}

#[test]
fn activation_pattern_matches_a_loop_oracle() {
    let t = tiny_trained();
    let layer = 3;
    let class = 2;
    let members = t.bench.test.filter_classes(&[class]);
    let (_, taps) = forward_full(&t.model, members.images(), &[layer + 1]).unwrap();
    let a = &taps[&(layer + 1)];
    let [n, c, h, w] = a.shape().try_into().unwrap();
    let mut avg = vec![0f64; c];
    for s in 0..n {
        for (f, v) in avg.iter_mut().enumerate() {
            let mut sum = 0f64;
            for i in 0..h * w {
                sum += f64::from(a.data()[(s * c + f) * h * w + i]);
            }
            *v += sum / (h * w) as f64 / n as f64;
        }
    }
    let lo = avg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = avg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let got = activation_pattern(&t.model, layer, class, &t.bench.test).unwrap();
    for (g, v) in got.iter().zip(&avg) {
        assert!((g - (v - lo) / (hi - lo)).abs() < 1e-9);
    }
    assert!(got.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn pattern_needs_samples_of_the_class() {
    let m = pointwise_model([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
    let only_zero = two_channel_data(3).filter_classes(&[0]);
    assert!(activation_pattern(&m, 0, 1, &only_zero).is_err());
    assert!(activation_pattern(&m, 1, 0, &only_zero).is_err());
}

#[test]
fn sharing_is_one_for_a_class_with_itself() {
    let t = tiny_trained();
    let k = default_top_k(t.model.num_classes());
    for c in 0..6 {
        assert_eq!(filter_sharing(&t.model, 0, c, c, &t.bench.test, 0.7, k).unwrap(), 1.0);
    }
}

#[test]
fn disjoint_filters_share_nothing() {
    let m = pointwise_model([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
    let data = two_channel_data(4);
    let p = SharingProfile::compute(&m, 0, &data, 0.7, 1).unwrap();
    assert_eq!(p.tags, vec![vec![0], vec![1]]);
    assert_eq!(p.frequency, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(filter_sharing(&m, 0, 0, 1, &data, 0.7, 1).unwrap(), 0.0);
}

#[test]
fn sharing_is_symmetric_and_bounded() {
    let t = tiny_trained();
    let p = SharingProfile::compute(&t.model, 0, &t.bench.test, 0.7, 2).unwrap();
    for a in 0..6 {
        for b in 0..6 {
            let s = p.similarity(a, b);
            assert_eq!(s, p.similarity(b, a));
            assert!((0.0..=1.0).contains(&s));
        }
    }
    assert!(p.tags.iter().all(|t| t.len() <= 2 && t.windows(2).all(|w| w[0] < w[1])));
}

#[test]
fn sharing_rejects_bad_arguments() {
    let t = tiny_trained();
    let d = &t.bench.test;
    assert!(SharingProfile::compute(&t.model, 0, d, 0.7, 6).is_err());
    assert!(SharingProfile::compute(&t.model, 0, d, 0.7, 0).is_err());
    assert!(SharingProfile::compute(&t.model, 0, d, 1.5, 1).is_err());
    assert!(SharingProfile::compute(&t.model, 1, d, 0.7, 1).is_err());
    assert!(filter_sharing(&t.model, 0, 0, 1, &d.filter_classes(&[0]), 0.7, 1).is_err());
    assert_eq!(default_top_k(20), 4);
    assert_eq!(default_top_k(6), 2);
    assert_eq!(default_top_k(3), 1);
}

#[test]
fn full_annotations_have_zero_delta() {
    let t = tiny_trained();
    let full: Vec<_> =
        (0..3).map(|c| SubgraphAnnotation::full(&t.model, ClusterId::Cluster(c), SPLIT).unwrap()).collect();
    let rows = per_cluster_eval(&t.model, &full, &t.bench.cluster_map, &t.bench.test, SPLIT).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.delta, Some(0.0));
        assert_eq!(r.delta_restricted, Some(0.0));
        assert_eq!(r.param_fraction, Some(1.0));
        assert_eq!(r.samples, 40);
    }
}

#[test]
fn restricted_accuracy_is_never_lower() {
    let t = tiny_trained();
    let annotations = [half_annotation(0), half_annotation(2)];
    let rows = per_cluster_eval(&t.model, &annotations, &t.bench.cluster_map, &t.bench.test, SPLIT).unwrap();
    for r in &rows {
        assert!(r.base_restricted_accuracy >= r.base_accuracy);
        if let (Some(a), Some(ar)) = (r.subgraph_accuracy, r.subgraph_restricted_accuracy) {
            assert!(ar >= a);
            assert!(r.param_fraction.unwrap() < 1.0);
        }
    }
    assert!(rows[1].subgraph_accuracy.is_none() && rows[1].delta.is_none());
    let mut buf = Vec::new();
    write_cluster_eval(&mut buf, &rows).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    // Monotone but non-linear is still perfectly ranked.
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]).unwrap() - 1.0).abs() < 1e-12);
    // Ties share their average rank: ranks (1.5, 1.5, 3) vs (1, 2, 3).
    assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 0.866_025_403_784_438_6).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!(spearman(&[1.0], &[1.0]).is_err());
    assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn latency_stats_summaries() {
    let s = LatencyStats::from_samples(vec![3.0, 1.0, 2.0, 10.0]);
    assert_eq!((s.median, s.mean, s.min, s.max, s.repetitions), (2.5, 4.0, 1.0, 10.0, 4));
    assert_eq!(LatencyStats::from_samples(vec![5.0, 1.0, 3.0]).median, 3.0);
    let mut calls = 0;
    let m = LatencyStats::measure(2, 3, 4, || {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 5);
    assert_eq!(m.repetitions, 3);
    assert!(LatencyStats::measure(0, 0, 1, || Ok(())).is_err());
}

#[test]
fn cdf_examples() {
    let cdf = confidence_cdf(&[0.1, 0.5, 0.5, 0.9], &[0.0, 0.5, 0.95, 1.0]);
    assert_eq!(cdf, vec![(0.0, 0.0), (0.5, 0.75), (0.95, 1.0), (1.0, 1.0)]);
}

#[test]
fn trace_thresholds() {
    let t = RouteTrace {
        sample: 0,
        label: 1,
        predicted_cluster: 0,
        confidence: 0.4,
        full_prediction: 1,
        full_macs: 100,
        subgraph_prediction: Some(2),
        subgraph_macs: Some(60),
    };
    assert!(t.routed(0.39) && !t.routed(0.4));
    assert_eq!((t.prediction(0.3), t.macs(0.3)), (2, 60));
    assert_eq!((t.prediction(0.4), t.macs(0.4)), (1, 100));
    let none = RouteTrace { subgraph_prediction: None, subgraph_macs: None, ..t };
    assert!(!none.routed(0.0));
    assert_eq!(none.macs(0.0), 100);
}

#[test]
fn threshold_sweep_degenerates_at_alpha_one() {
    let t = tiny_trained();
    let r = router();
    let alphas = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];
    let report = threshold_sweep(&r, &alphas, &t.bench.test, 1, 0, 4).unwrap();
    assert_eq!(report.records.len(), alphas.len() + 1);
    let base = &report.records[0];
    assert_eq!(base.alpha, None);
    let last = report.records.last().unwrap();
    assert_eq!(last.accuracy, base.accuracy);
    assert_eq!(last.routed_fraction, 0.0);
    assert_eq!(report.cdf.last().unwrap().1, 1.0);
    for (rec, (x, f)) in report.records[1..].iter().zip(&report.cdf) {
        assert_eq!(rec.alpha, Some(*x));
        // Every cluster has a subgraph, so routed = confidence above alpha.
        assert!((rec.routed_fraction - (1.0 - f)).abs() < 1e-12);
    }
    let fracs: Vec<f64> = report.records[1..].iter().map(|r| r.routed_fraction).collect();
    assert!(fracs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn traces_agree_with_direct_inference() {
    let t = tiny_trained();
    let mut r = router();
    let traces = route_traces(&r, &t.bench.test).unwrap();
    for alpha in [0.0, 0.5, 0.8] {
        r.set_alpha(alpha).unwrap();
        let direct = r.infer_batch(t.bench.test.images()).unwrap();
        for (tr, d) in traces.iter().zip(&direct) {
            assert_eq!(tr.prediction(alpha), d.prediction);
            assert_eq!(tr.routed(alpha), d.decision.routed);
            assert_eq!(tr.macs(alpha), d.macs);
        }
    }
}

#[test]
fn threshold_sweep_rejects_bad_grids() {
    let t = tiny_trained();
    let r = router();
    assert!(threshold_sweep(&r, &[], &t.bench.test, 1, 0, 1).is_err());
    assert!(threshold_sweep(&r, &[1.5], &t.bench.test, 1, 0, 1).is_err());
    assert!(threshold_sweep(&r, &[0.5], &t.bench.test.filter_classes(&[]), 1, 0, 1).is_err());
}

#[test]
fn retention_levels_cost_less_as_they_shrink() {
    let t = tiny_trained();
    let images = t.bench.test.images().select_outer(&[0, 1]).unwrap();
    let rows = latency_vs_retention(&t.model, 3, &[1.0, 0.75, 0.5, 0.25], &images, 1, 0).unwrap();
    assert!(rows.windows(2).all(|w| w[1].mac_count < w[0].mac_count));
    assert_eq!(rows[0].mac_count, semroute::model::mac_count(&t.model, None).unwrap());
}

#[test]
fn exported_features_match_collected_ones() {
    let t = tiny_trained();
    let mut a = Vec::new();
    let rows = write_features(&mut a, &t.model, 5, &t.bench.test, &t.bench.cluster_map, 2).unwrap();
    assert_eq!(rows, t.bench.test.len());
    let mut b = Vec::new();
    write_features(&mut b, &t.model, 5, &t.bench.test, &t.bench.cluster_map, 2).unwrap();
    assert_eq!(a, b);

    let f = collect_features(&t.model, 5, &t.bench.test, 2).unwrap();
    let mut rdr = csv::Reader::from_reader(a.as_slice());
    assert_eq!(rdr.headers().unwrap().len(), 2 + f.feature_dim());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        let label = t.bench.test.labels()[i];
        assert_eq!(rec[0].parse::<usize>().unwrap(), label);
        assert_eq!(rec[1].parse::<usize>().unwrap(), t.bench.cluster_map.cluster_of(label).unwrap());
        let values: Vec<f32> = rec.iter().skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.as_slice(), f.rows.outer(i));
    }
}
