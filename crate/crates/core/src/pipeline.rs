//! The end-to-end run on the synthetic desk benchmark: train the base model,
//! pick the split layer, train the route predictor, sweep subgraphs and
//! benchmark routed inference.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{per_cluster_eval, threshold_sweep, write_cluster_eval, BenchmarkRecord, ClusterEvalRow};
use crate::desk::{self, DeskBenchmark, DeskConfig};
use crate::error::Result;
use crate::extract::{sweep_extract, ClusterData, ExtractionConfig, ScoreCache, SweepGrid, DEFAULT_EPSILON};
use crate::model::{io, ModelGraph, SubgraphAnnotation};
use crate::probe::{evaluate, train_classifier, TrainConfig};
use crate::router::{select_split_layer, train_srp, Router, RoutingConfig, SplitSelection, SrpReport};
use crate::scoring::Criterion;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DeskConfig,
    pub model_seed: u64,
    pub base_training: TrainConfig,
    pub split_target: f64,
    pub k_prime: usize,
    pub probe: TrainConfig,
    pub srp_training: TrainConfig,
    pub criterion: Criterion,
    pub epsilon: f64,
    pub grid: SweepGrid,
    pub alphas: Vec<f64>,
    pub repetitions: usize,
    pub warmup: usize,
    pub latency_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DeskConfig::default(),
            model_seed: 1,
            base_training: desk::desk_train_config(1),
            split_target: 0.75,
            k_prime: 2,
            probe: TrainConfig::default(),
            srp_training: desk::desk_train_config(2),
            criterion: Criterion::Dcs,
            epsilon: DEFAULT_EPSILON,
            grid: SweepGrid::complemented(),
            alphas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            repetitions: 30,
            warmup: 3,
            latency_samples: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub base_test_accuracy: f64,
    pub split: SplitSelection,
    pub srp: SrpReport,
    pub tau_acc: f64,
    pub accepted_points: usize,
    /// (r_L, r_M) of the accepted point with the fewest MACs.
    pub best_point: Option<(f64, f64)>,
    pub annotations: Vec<SubgraphAnnotation>,
    pub cluster_eval: Vec<ClusterEvalRow>,
    pub bench: Vec<BenchmarkRecord>,
}

/// Everything the pipeline produced, including the trained networks.
pub struct PipelineOutput {
    pub benchmark: DeskBenchmark,
    pub model: ModelGraph,
    pub router: Router,
    pub report: PipelineReport,
}

/// Runs every stage; artifacts are written under `out_dir` when given.
pub fn run(config: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutput> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("pipeline.config.json"), serde_json::to_string_pretty(config)?)?;
    }
    let bench = desk::generate(&config.data)?;
    let untrained = desk::desk_model(&config.data, config.model_seed)?;
    let trained = train_classifier(&untrained, &bench.train, &config.base_training)?;
    let model = trained.model;
    let base_test_accuracy = evaluate(&model, &bench.test)?;
    log::info!("base model test accuracy {base_test_accuracy:.4}");

    let split = select_split_layer(&model, &bench.train, &bench.val, config.split_target, config.k_prime, &config.probe)?;
    let m = split.layer;
    let (srp, srp_report) = train_srp(&model, m, &bench.train, &bench.val, &bench.cluster_map, &config.srp_training)?;
    log::info!("split layer {m}, route predictor accuracy {:.4}", srp_report.held_out_accuracy);

    let clusters = ClusterData::for_clusters(&model, &bench.cluster_map, &bench.train, &bench.val, m)?;
    let mean_base = clusters.iter().map(|c| c.base_accuracy).sum::<f64>() / clusters.len() as f64;
    let mut extraction = ExtractionConfig::new(m);
    extraction.epsilon = config.epsilon;
    extraction.criterion = config.criterion;
    extraction.k_prime = config.k_prime;
    extraction.probe = config.probe.clone();
    let extraction = extraction.with_derived_tau(mean_base);
    let mut cache = ScoreCache::new();
    let sweep = sweep_extract(&model, &clusters, &config.grid, &extraction, &mut cache)?;
    let annotations = sweep.routable_annotations(&clusters);

    let router = Router::new(model.clone(), srp.clone(), &annotations, RoutingConfig::new(1.0)?)?;
    let thresholds =
        threshold_sweep(&router, &config.alphas, &bench.test, config.repetitions, config.warmup, config.latency_samples)?;
    let cluster_eval = per_cluster_eval(&model, &annotations, &bench.cluster_map, &bench.test, m)?;

    let report = PipelineReport {
        base_test_accuracy,
        split,
        srp: srp_report,
        tau_acc: sweep.tau_acc,
        accepted_points: sweep.accepted().count(),
        best_point: sweep.best_point().map(|p| (p.r_last, p.r_split)),
        annotations: annotations.clone(),
        cluster_eval,
        bench: thresholds.records.clone(),
    };

    if let Some(dir) = out_dir {
        let data = dir.join("data");
        fs::create_dir_all(&data)?;
        bench.train.save(data.join("train.bin"))?;
        bench.val.save(data.join("val.bin"))?;
        bench.test.save(data.join("test.bin"))?;
        bench.cluster_map.save(data.join("clusters.json"))?;
        io::save_model(&model, dir.join("model"))?;
        srp.save(dir.join("srp"))?;
        fs::write(dir.join("split.json"), serde_json::to_string_pretty(&report.split)?)?;
        sweep.save_csv(dir.join("sweep.csv"))?;
        let ann_dir = dir.join("annotations");
        fs::create_dir_all(&ann_dir)?;
        for a in &annotations {
            a.save(ann_dir.join(format!("cluster_{}.json", a.cluster_id)))?;
        }
        thresholds.write_records(fs::File::create(dir.join("bench.csv"))?)?;
        thresholds.write_traces(fs::File::create(dir.join("route_traces.csv"))?)?;
        thresholds.write_cdf(fs::File::create(dir.join("confidence_cdf.csv"))?)?;
        write_cluster_eval(fs::File::create(dir.join("cluster_eval.csv"))?, &report.cluster_eval)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(PipelineOutput { benchmark: bench, model, router, report })
}
