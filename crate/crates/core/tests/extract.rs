mod common;

use std::collections::BTreeMap;

use common::tiny_trained;
use proptest::prelude::*;
use semroute::extract::{
    self, derive_tau, extract_subgraph, kept_count, model_schedule, pareto_front, prune_global, retention_schedule,
    sweep_extract, ClusterData, EvalSet, ExtractionConfig, ScoreCache, SweepGrid,
};
use semroute::model::{
    accuracy_of, argmax_rows, forward_masked, mac_count, predict_logits, ClusterId, Dataset, ModelBuilder, Split,
};
use semroute::probe::TrainConfig;
use semroute::scoring::{score_layer, Criterion, ScoringConfig};
use semroute::Tensor;

const SPLIT: usize = 5;

fn config() -> ExtractionConfig {
    ExtractionConfig { probe: TrainConfig { epochs: 30, ..TrainConfig::default() }, ..ExtractionConfig::new(SPLIT) }
}

fn clusters() -> Vec<ClusterData> {
    let t = tiny_trained();
    ClusterData::for_clusters(&t.model, &t.bench.cluster_map, &t.bench.train, &t.bench.val, SPLIT).unwrap()
}

/// Accuracy of the annotated model over raw images, independent of the cached features.
fn reevaluate(ann: &semroute::model::SubgraphAnnotation, data: &Dataset) -> f64 {
    let logits = forward_masked(&tiny_trained().model, data.images(), ann).unwrap();
    accuracy_of(&argmax_rows(&logits), data.labels())
}

#[test]
fn schedule_examples() {
    let s = retention_schedule(6, 2, 0.9, 0.1).unwrap();
    assert_eq!(s[&2], 0.1);
    assert_eq!(s[&6], 0.9);
    assert!((s[&4] - 0.5).abs() < 1e-15);
    assert!(retention_schedule(6, 2, 0.4, 0.4).unwrap().values().all(|&r| r == 0.4));
    assert_eq!(retention_schedule(3, 3, 0.7, 0.2).unwrap(), BTreeMap::from([(3, 0.7)]));
    assert!(retention_schedule(2, 6, 0.5, 0.5).is_err());
    assert!(retention_schedule(6, 2, 0.0, 0.5).is_err());
    assert!(retention_schedule(6, 2, 0.5, 1.5).is_err());
}

#[test]
fn model_schedule_covers_prunable_convs() {
    let model = &tiny_trained().model;
    let s = model_schedule(model, 3, 0.5, 0.9).unwrap();
    assert_eq!(s.keys().copied().collect::<Vec<_>>(), vec![3, 5, 8, 10]);
    assert!((s[&5] - (0.9 + 2.0 * (0.5 - 0.9) / 7.0)).abs() < 1e-15);
    assert!(model_schedule(model, 11, 0.5, 0.9).is_err());
    assert!(model_schedule(model, 99, 0.5, 0.9).is_err());
}

#[test]
fn ceil_rule_keeps_at_least_one() {
    assert_eq!(kept_count(0.1, 8), 1);
    assert_eq!(kept_count(0.5, 8), 4);
    assert_eq!(kept_count(0.51, 8), 5);
    assert_eq!(kept_count(0.3, 10), 3);
    assert_eq!(kept_count(1e-9, 32), 1);
}

#[test]
fn tau_is_derived_from_epsilon() {
    assert!((derive_tau(0.8, 0.02) - 0.78).abs() < 1e-15);
    assert_eq!(derive_tau(0.01, 0.02), 0.0);
    let cfg = ExtractionConfig::new(0).with_derived_tau(0.9);
    assert!((cfg.tau_acc - 0.88).abs() < 1e-15);
}

#[test]
fn full_retention_reproduces_base_cluster_accuracy() {
    let t = tiny_trained();
    let mut cache = ScoreCache::new();
    for c in clusters() {
        let e = extract_subgraph(&t.model, c.cluster, &c.classes, &c.score_set, &c.eval, &config(), &mut cache).unwrap();
        let eval = t.bench.val.filter_classes(&c.classes);
        let base = accuracy_of(&argmax_rows(&predict_logits(&t.model, eval.images()).unwrap()), eval.labels());
        assert_eq!(e.accuracy, base);
        assert_eq!(e.accuracy, c.base_accuracy);
        assert!(e.annotation.retained.iter().all(|(&l, k)| k.len() == t.model.conv_out_channels(l).unwrap()));
        assert!(e.restricted_accuracy >= e.accuracy);
    }
}

#[test]
fn accepted_flag_matches_independent_evaluation() {
    let t = tiny_trained();
    let mut cache = ScoreCache::new();
    let cs = clusters();
    let base_mean = cs.iter().map(|c| c.base_accuracy).sum::<f64>() / cs.len() as f64;
    let cfg = config().with_retention(0.5, 0.5).with_derived_tau(base_mean);
    for c in &cs {
        let e = extract_subgraph(&t.model, c.cluster, &c.classes, &c.score_set, &c.eval, &cfg, &mut cache).unwrap();
        let acc = reevaluate(&e.annotation, &t.bench.val.filter_classes(&c.classes));
        assert_eq!(acc, e.accuracy);
        assert_eq!(e.accepted, acc >= cfg.tau_acc);
        assert_eq!(e.annotation.recorded_accuracy, e.accuracy);
        assert_eq!(e.mac_count, mac_count(&t.model, Some(&e.annotation)).unwrap());
    }
}

#[test]
fn empty_cluster_data_is_rejected() {
    let t = tiny_trained();
    let empty = Dataset::new(Tensor::zeros(&[0, 3, 16, 16]), vec![], Split::Val).unwrap();
    let eval = EvalSet::new(&t.model, &empty, SPLIT).unwrap();
    let c = &clusters()[0];
    let mut cache = ScoreCache::new();
    assert!(extract_subgraph(&t.model, c.cluster, &c.classes, &c.score_set, &eval, &config(), &mut cache).is_err());
    assert!(extract_subgraph(&t.model, c.cluster, &c.classes, &empty, &c.eval, &config(), &mut cache).is_err());
}

#[test]
fn trivial_grid_is_accepted_and_impossible_threshold_accepts_nothing() {
    let t = tiny_trained();
    let cs = clusters();
    let base_mean = cs.iter().map(|c| c.base_accuracy).sum::<f64>() / cs.len() as f64;
    let mut cache = ScoreCache::new();
    let r = sweep_extract(&t.model, &cs, &SweepGrid::single(1.0, 1.0), &config().with_derived_tau(base_mean), &mut cache).unwrap();
    assert!(r.points[0].accepted);
    assert_eq!(r.best, Some(0));

    let impossible = ExtractionConfig { tau_acc: 1.01, ..config() };
    let grid = SweepGrid { r_last: vec![1.0, 0.5], r_split: vec![1.0] };
    let r = sweep_extract(&t.model, &cs, &grid, &impossible, &mut cache).unwrap();
    assert_eq!(r.accepted().count(), 0);
    assert!(r.best.is_none());
    assert!(r.routable_annotations(&cs).is_empty());
}

#[test]
fn pareto_summary_matches_brute_force() {
    let t = tiny_trained();
    let cs = clusters();
    let base_mean = cs.iter().map(|c| c.base_accuracy).sum::<f64>() / cs.len() as f64;
    let cfg = config().with_derived_tau(base_mean);
    let grid = SweepGrid { r_last: vec![0.8, 0.3], r_split: vec![0.9] };
    let mut cache = ScoreCache::new();
    let r = sweep_extract(&t.model, &cs, &grid, &cfg, &mut cache).unwrap();
    let mut brute = Vec::new();
    for p in &r.points {
        let mut acc = 0.0;
        let mut macs = 0.0;
        for (e, c) in p.extractions.iter().zip(&cs) {
            acc += reevaluate(&e.annotation, &t.bench.val.filter_classes(&c.classes));
            macs += mac_count(&t.model, Some(&e.annotation)).unwrap() as f64;
        }
        let (acc, macs) = (acc / cs.len() as f64, macs / cs.len() as f64);
        assert!((acc - p.avg_accuracy).abs() < 1e-12);
        assert_eq!(macs, p.avg_mac_count);
        assert_eq!(p.accepted, acc >= cfg.tau_acc);
        brute.push((macs, acc));
    }
    let mut front = Vec::new();
    for (i, &(c, a)) in brute.iter().enumerate() {
        if !brute.iter().any(|&(c2, a2)| c2 <= c && a2 >= a && (c2 < c || a2 > a)) {
            front.push(i);
        }
    }
    front.sort_by(|&a, &b| brute[a].0.total_cmp(&brute[b].0));
    assert_eq!(r.pareto, front);
    let best = (0..brute.len()).filter(|&i| r.points[i].accepted).min_by(|&a, &b| brute[a].0.total_cmp(&brute[b].0));
    assert_eq!(r.best, best);
}

#[test]
fn cost_grows_with_r_last_and_retained_sets_nest() {
    let t = tiny_trained();
    let c = &clusters()[1];
    let mut cache = ScoreCache::new();
    let mut prev: Option<semroute::extract::Extraction> = None;
    for r_last in [0.1, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let cfg = config().with_retention(r_last, 0.9);
        let e = extract_subgraph(&t.model, c.cluster, &c.classes, &c.score_set, &c.eval, &cfg, &mut cache).unwrap();
        if let Some(p) = &prev {
            assert!(e.mac_count >= p.mac_count);
            for (l, kept) in &p.annotation.retained {
                assert!(kept.iter().all(|f| e.annotation.retained[l].contains(f)), "layer {l}");
            }
        }
        prev = Some(e);
    }
}

#[test]
fn sweep_csv_has_one_row_per_point_and_cluster() {
    let t = tiny_trained();
    let cs = clusters();
    let grid = SweepGrid { r_last: vec![0.9, 0.5, 0.2], r_split: vec![0.9, 0.5] };
    let mut cache = ScoreCache::new();
    let r = sweep_extract(&t.model, &cs, &grid, &config(), &mut cache).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "r_L,r_M,cluster_id,accuracy,mac_count,accepted");
    assert_eq!(lines.count(), grid.points().len() * cs.len());
    // One score table per (cluster, layer); later points reuse them.
    assert_eq!(cache.len(), cs.len() * 3);
}

#[test]
fn sweep_is_deterministic() {
    let t = tiny_trained();
    let cs = clusters();
    let grid = SweepGrid { r_last: vec![0.6, 0.3], r_split: vec![0.8] };
    let a = sweep_extract(&t.model, &cs, &grid, &config(), &mut ScoreCache::new()).unwrap();
    let b = sweep_extract(&t.model, &cs, &grid, &config(), &mut ScoreCache::new()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn default_grids() {
    let g = SweepGrid::default();
    assert_eq!(g.r_last, vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]);
    assert_eq!(g.r_split, vec![0.1, 0.08, 0.06, 0.04, 0.02]);
    assert_eq!(g.points().len(), 45);
    assert_eq!(SweepGrid::complemented().r_split, vec![0.9, 0.92, 0.94, 0.96, 0.98]);
    assert!(SweepGrid { r_last: vec![], r_split: vec![0.5] }.validate().is_err());
}

#[test]
fn pareto_front_small_cases() {
    assert_eq!(pareto_front(&[(3.0, 0.9), (1.0, 0.5), (2.0, 0.4), (1.0, 0.5)]), vec![1, 3, 0]);
    assert!(pareto_front(&[]).is_empty());
}

#[test]
fn global_pruning_at_full_retention_keeps_accuracy() {
    let t = tiny_trained();
    let retention: BTreeMap<usize, f64> = [5, 8, 10].into_iter().map(|l| (l, 1.0)).collect();
    let scoring = ScoringConfig { probe: TrainConfig { epochs: 20, ..TrainConfig::default() }, ..ScoringConfig::default() };
    let ann = prune_global(&t.model, &t.bench.train, &retention, &scoring).unwrap();
    assert_eq!(ann.cluster_id, ClusterId::All);
    let base = accuracy_of(&argmax_rows(&predict_logits(&t.model, t.bench.test.images()).unwrap()), t.bench.test.labels());
    assert_eq!(reevaluate(&ann, &t.bench.test), base);

    let mut bad = retention.clone();
    bad.insert(8, 1.5);
    assert!(prune_global(&t.model, &t.bench.train, &bad, &scoring).is_err());
    let mut missing = retention.clone();
    missing.remove(&8);
    assert!(prune_global(&t.model, &t.bench.train, &missing, &scoring).is_err());
}

#[test]
fn single_layer_global_pruning_keeps_top_half() {
    let model = ModelBuilder::new(&[1, 6, 6], 3).conv2d("c", 6, 3, 1, 1).relu().flatten().dense("d", 2).build().unwrap();
    let mut r = common::rng(2);
    let data = Dataset::new(common::random_tensor(&[10, 1, 6, 6], &mut r), (0..10).map(|i| i % 2).collect(), Split::Train).unwrap();
    for criterion in [Criterion::Dcs, Criterion::L1, Criterion::Apoz] {
        let scoring = ScoringConfig { criterion, k_prime: 2, probe: TrainConfig { epochs: 20, ..TrainConfig::default() } };
        let ann = prune_global(&model, &data, &BTreeMap::from([(0, 0.5)]), &scoring).unwrap();
        let table = score_layer(&model, 0, &data, &scoring).unwrap();
        let mut want = table.ranking()[..3].to_vec();
        want.sort_unstable();
        assert_eq!(ann.retained[&0], want, "{criterion}");
    }
}

#[test]
fn routable_annotations_respect_own_cluster_margin() {
    let t = tiny_trained();
    let cs = clusters();
    let grid = SweepGrid { r_last: vec![0.4], r_split: vec![0.6] };
    let r = sweep_extract(&t.model, &cs, &grid, &config(), &mut ScoreCache::new()).unwrap();
    assert!(r.points[0].accepted);
    let routable = r.routable_annotations(&cs);
    for (e, c) in r.points[0].extractions.iter().zip(&cs) {
        let kept = routable.iter().any(|a| a.cluster_id == c.cluster);
        assert_eq!(kept, e.accuracy >= c.base_accuracy - r.epsilon);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedule_matches_formula(m in 0usize..40, span in 1usize..40, r_l in 0.001f64..1.0, r_m in 0.001f64..1.0) {
        let l = m + span;
        let s = retention_schedule(l, m, r_l, r_m).unwrap();
        prop_assert_eq!(s[&m], r_m);
        prop_assert_eq!(s[&l], r_l);
        prop_assert_eq!(s.len(), span + 1);
        for (&i, &v) in &s {
            let want = r_m + (i - m) as f64 * (r_l - r_m) / span as f64;
            prop_assert!((v - want).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn kept_count_is_ceil_with_floor_of_one(r in 0.001f64..=1.0, c in 1usize..512) {
        let k = kept_count(r, c);
        prop_assert!(k >= 1 && k <= c);
        prop_assert!(k as f64 >= r * c as f64 - 1e-6);
        prop_assert!((k as f64) < r * c as f64 + 1.0 || k == 1);
    }
}

#[test]
fn eval_set_features_match_prefix() {
    let t = tiny_trained();
    let e = EvalSet::new(&t.model, &t.bench.val, SPLIT).unwrap();
    let direct = extract::prefix_activations(&t.model, t.bench.val.images(), SPLIT).unwrap();
    assert_eq!(e.features, direct);
    assert_eq!(e.features.shape()[1..], *t.model.shape_before(SPLIT));
}
