//! Command-line surface. Every subcommand reads and writes the on-disk
//! formats of [`crate::model`] and leaves a `<command>.config.json` snapshot
//! of its arguments in the output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{self, SharingProfile};
use crate::desk::{self, DeskConfig};
use crate::error::{AtPath, Error, Result};
use crate::extract::{self, ClusterData, EvalSet, ExtractionConfig, ScoreCache, SweepGrid};
use crate::model::{io, mac_count, ClusterId, ClusterMap, Dataset, ModelGraph, Split, SubgraphAnnotation};
use crate::pipeline::{self, PipelineConfig};
use crate::probe::{self, TrainConfig};
use crate::router::{self, Router, RoutingConfig, SrpClassifier};
use crate::scoring::{score_layer, Criterion, ScoringConfig};

/// Environment variable consulted when `--out-dir` is not given.
pub const OUT_DIR_ENV: &str = "SEMROUTE_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "semroute", version, about = "Cluster-routed subgraph inference for small CNNs", args_override_self = true)]
pub struct Cli {
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark (train/val/test splits and cluster map).
    MakeData(MakeDataArgs),
    /// Train the reference CNN on a dataset file.
    TrainBase(TrainBaseArgs),
    /// Pick the earliest conv layer whose incoming activation reaches a probe accuracy target.
    SelectSplit(SelectSplitArgs),
    /// Train the cluster route predictor on frozen prefix activations.
    TrainSrp(TrainSrpArgs),
    /// Score the filters of one conv layer.
    Score(ScoreArgs),
    /// Extract one cluster's subgraph at given retention rates.
    Extract(ExtractArgs),
    /// Extract every cluster over a grid of retention rates.
    Sweep(SweepArgs),
    /// Prune the whole model as a single macro-cluster.
    Prune(PruneArgs),
    /// Run routed inference over a dataset and write per-input traces.
    Infer(InferArgs),
    /// Accuracy, routed fraction, cost and latency across confidence thresholds.
    Bench(BenchArgs),
    /// Activation patterns and filter sharing between classes.
    Analyze(AnalyzeArgs),
    /// Write pooled layer features as CSV.
    ExportFeatures(ExportFeaturesArgs),
    /// Run every stage on the synthetic benchmark.
    Pipeline(PipelineArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeData(_) => "make-data",
            Command::TrainBase(_) => "train-base",
            Command::SelectSplit(_) => "select-split",
            Command::TrainSrp(_) => "train-srp",
            Command::Score(_) => "score",
            Command::Extract(_) => "extract",
            Command::Sweep(_) => "sweep",
            Command::Prune(_) => "prune",
            Command::Infer(_) => "infer",
            Command::Bench(_) => "bench",
            Command::Analyze(_) => "analyze",
            Command::ExportFeatures(_) => "export-features",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutArgs {
    /// Output directory; falls back to $SEMROUTE_OUT_DIR, then the current directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl OutArgs {
    pub fn resolve(&self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(dir)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BaseTrainFlags {
    #[arg(long, default_value_t = 0.02)]
    pub lr: f32,
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl BaseTrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeFlags {
    #[arg(long, default_value_t = 0.05)]
    pub probe_lr: f32,
    #[arg(long, default_value_t = 100)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub probe_batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub probe_weight_decay: f32,
    #[arg(long, default_value_t = 0)]
    pub probe_seed: u64,
    /// Side of the pooled grid per filter.
    #[arg(long, default_value_t = 2)]
    pub k_prime: usize,
}

impl ProbeFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.probe_lr,
            epochs: self.probe_epochs,
            batch_size: self.probe_batch_size,
            weight_decay: self.probe_weight_decay,
            seed: self.probe_seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MakeDataArgs {
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    #[arg(long, default_value_t = 4)]
    pub classes_per_cluster: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 150)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 40)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.7)]
    pub pixel_noise: f32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainBaseArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Optional split reported after training.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Seed of the weight initialisation.
    #[arg(long, default_value_t = 1)]
    pub model_seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: BaseTrainFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectSplitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    pub target: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainSrpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub split_layer: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: BaseTrainFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionArg {
    Dcs,
    Taylor,
    Apoz,
    Sensitivity,
    L1,
    Random,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Dcs => Criterion::Dcs,
            CriterionArg::Taylor => Criterion::Taylor,
            CriterionArg::Apoz => Criterion::Apoz,
            CriterionArg::Sensitivity => Criterion::Sensitivity,
            CriterionArg::L1 => Criterion::L1,
            CriterionArg::Random => Criterion::Random,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Samples to score on (normally the training split).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    /// Cluster id, or ALL for every class.
    #[arg(long, default_value = "ALL")]
    pub cluster: String,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::Dcs)]
    pub criterion: CriterionArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub cluster: usize,
    #[arg(long)]
    pub split_layer: usize,
    #[arg(long, default_value_t = 1.0)]
    pub r_last: f64,
    #[arg(long, default_value_t = 1.0)]
    pub r_split: f64,
    #[arg(long, default_value_t = extract::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Fixed accuracy threshold; defaults to the cluster's base accuracy minus epsilon.
    #[arg(long)]
    pub tau_acc: Option<f64>,
    #[arg(long, value_enum, default_value_t = CriterionArg::Dcs)]
    pub criterion: CriterionArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridArg {
    /// r_L 0.9..0.1, r_M 0.10..0.02.
    Default,
    /// r_L 0.9..0.1, r_M 0.90..0.98.
    Complemented,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub split_layer: usize,
    #[arg(long, value_enum, default_value_t = GridArg::Default)]
    pub grid: GridArg,
    /// Explicit r_L values, overriding the grid's.
    #[arg(long, value_delimiter = ',')]
    pub r_last: Vec<f64>,
    /// Explicit r_M values, overriding the grid's.
    #[arg(long, value_delimiter = ',')]
    pub r_split: Vec<f64>,
    #[arg(long, default_value_t = extract::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value_t = CriterionArg::Dcs)]
    pub criterion: CriterionArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Samples to score on.
    #[arg(long)]
    pub data: PathBuf,
    /// Samples to measure the pruned model on.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub split_layer: usize,
    /// Retention applied to every prunable layer.
    #[arg(long, default_value_t = 0.5)]
    pub retention: f64,
    /// Per-layer overrides as LAYER=RATE, e.g. 8=0.6.
    #[arg(long, value_delimiter = ',')]
    pub layer_retention: Vec<String>,
    #[arg(long, value_enum, default_value_t = CriterionArg::Dcs)]
    pub criterion: CriterionArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RouterArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory written by train-srp.
    #[arg(long)]
    pub srp: PathBuf,
    /// Directory of annotation JSON files (may be empty).
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Cluster map JSON; adds true clusters to traces and enables the per-cluster table.
    #[arg(long)]
    pub clusters: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub router: RouterArgs,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Only route the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub router: RouterArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Inputs per timed run.
    #[arg(long, default_value_t = 50)]
    pub latency_samples: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    /// Conv layers to analyse; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = analysis::DEFAULT_ACTIVATION_QUANTILE)]
    pub quantile: f64,
    /// Classes tagged per filter; defaults to ceil(0.2 * classes).
    #[arg(long)]
    pub top_k: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportFeaturesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value_t = 2)]
    pub k_prime: usize,
    /// Output file; defaults to features_l<LAYER>.csv in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    /// Pipeline settings as JSON; missing fields take their defaults.
    #[arg(long)]
    pub settings: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

/// Expands `--config FILE` into flags placed right after the subcommand, so
/// flags given on the command line still take precedence.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut out = Vec::with_capacity(args.len());
    let mut config = None;
    let mut iter = args.into_iter();
    while let Some(a) = iter.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let path = iter.next().ok_or_else(|| Error::invalid("--config needs a file path"))?;
            config = Some(PathBuf::from(path));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            out.push(a);
        }
    }
    let Some(path) = config else { return Ok(out) };
    let text = fs::read_to_string(&path).at(&path)?;
    let map: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("config file {}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            serde_json::Value::Bool(true) => flags.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => flags.extend([flag, s]),
            serde_json::Value::Number(n) => flags.extend([flag, n.to_string()]),
            serde_json::Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|v| match v {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                flags.extend([flag, parts.join(",")]);
            }
            serde_json::Value::Object(_) => {
                return Err(Error::invalid(format!("config key '{key}' must not be an object")));
            }
        }
    }
    // Insert after the first positional token (the subcommand).
    let pos = out.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map_or(out.len(), |p| p + 2);
    let tail = out.split_off(pos.min(out.len()));
    out.extend(flags.into_iter().map(OsString::from));
    out.extend(tail);
    Ok(out)
}

fn snapshot<T: Serialize>(dir: &Path, command: &str, args: &T) -> Result<()> {
    write_json(&dir.join(format!("{command}.config.json")), args)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).at(path)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).at(path)
}

fn load_data(path: &Path, split: Split) -> Result<Dataset> {
    Dataset::load(path, split)
}

fn load_clusters(path: &Path, model: &ModelGraph) -> Result<ClusterMap> {
    ClusterMap::load(path, model.num_classes())
}

/// All `*.json` annotations in `dir`, sorted by file name.
pub fn load_annotations(dir: &Path, model: &ModelGraph) -> Result<Vec<SubgraphAnnotation>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir).at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| SubgraphAnnotation::load(p, Some(model))).collect()
}

fn build_router(args: &RouterArgs, alpha: f64) -> Result<(Router, Dataset)> {
    let model = io::load_model(&args.model)?;
    let srp = SrpClassifier::load(&args.srp)?;
    let annotations = load_annotations(&args.annotations, &model)?;
    let data = load_data(&args.data, Split::Test)?;
    data.check_labels(model.num_classes())?;
    Ok((Router::new(model, srp, &annotations, RoutingConfig::new(alpha)?)?, data))
}

/// Runs a parsed command.
pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::MakeData(a) => make_data(a),
        Command::TrainBase(a) => train_base(a),
        Command::SelectSplit(a) => select_split(a),
        Command::TrainSrp(a) => train_srp(a),
        Command::Score(a) => score(a),
        Command::Extract(a) => extract_one(a),
        Command::Sweep(a) => sweep(a),
        Command::Prune(a) => prune(a),
        Command::Infer(a) => infer(a),
        Command::Bench(a) => bench(a),
        Command::Analyze(a) => analyze(a),
        Command::ExportFeatures(a) => export(a),
        Command::Pipeline(a) => run_pipeline(a),
    }
}

fn make_data(a: &MakeDataArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "make-data", a)?;
    let config = DeskConfig {
        clusters: a.clusters,
        classes_per_cluster: a.classes_per_cluster,
        image_size: a.image_size,
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        test_per_class: a.test_per_class,
        pixel_noise: a.pixel_noise,
        seed: a.seed,
    };
    let b = desk::generate(&config)?;
    b.train.save(dir.join("train.bin"))?;
    b.val.save(dir.join("val.bin"))?;
    b.test.save(dir.join("test.bin"))?;
    b.cluster_map.save(dir.join("clusters.json"))?;
    println!("wrote {} / {} / {} samples to {}", b.train.len(), b.val.len(), b.test.len(), dir.display());
    Ok(())
}

fn train_base(a: &TrainBaseArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "train-base", a)?;
    let train = load_data(&a.train, Split::Train)?;
    let classes = train.labels().iter().max().map_or(0, |m| m + 1);
    let net = desk::desk_model_for(train.sample_shape(), classes, a.model_seed)?;
    let trained = probe::train_classifier(&net, &train, &a.training.config())?;
    io::save_model(&trained.model, dir.join("model"))?;
    write_json(&dir.join("train_trace.json"), &trained.trace)?;
    let last = trained.trace.last().expect("at least one epoch");
    println!("final epoch: loss {:.4}, train accuracy {:.4}", last.loss, last.accuracy);
    if let Some(val) = &a.val {
        let val = load_data(val, Split::Val)?;
        println!("held-out accuracy {:.4}", probe::evaluate(&trained.model, &val)?);
    }
    Ok(())
}

fn select_split(a: &SelectSplitArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "select-split", a)?;
    let model = io::load_model(&a.model)?;
    let train = load_data(&a.train, Split::Train)?;
    let val = load_data(&a.val, Split::Val)?;
    let sel = router::select_split_layer(&model, &train, &val, a.target, a.probe.k_prime, &a.probe.config())?;
    write_json(&dir.join("split.json"), &sel)?;
    for (l, acc) in &sel.candidates {
        println!("layer {l:>3}: {acc:.4}");
    }
    if let Some(w) = &sel.warning {
        eprintln!("warning: {w}");
    }
    println!("split layer {}", sel.layer);
    Ok(())
}

fn train_srp(a: &TrainSrpArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "train-srp", a)?;
    let model = io::load_model(&a.model)?;
    let train = load_data(&a.train, Split::Train)?;
    let val = load_data(&a.val, Split::Val)?;
    let clusters = load_clusters(&a.clusters, &model)?;
    let (srp, report) = router::train_srp(&model, a.split_layer, &train, &val, &clusters, &a.training.config())?;
    srp.save(dir.join("srp"))?;
    write_json(&dir.join("srp_report.json"), &report)?;
    println!("route predictor held-out accuracy {:.4}", report.held_out_accuracy);
    Ok(())
}

fn parse_cluster(s: &str) -> Result<ClusterId> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(ClusterId::All);
    }
    s.parse().map(ClusterId::Cluster).map_err(|_| Error::invalid(format!("cluster '{s}' is neither an id nor ALL")))
}

fn score(a: &ScoreArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "score", a)?;
    let model = io::load_model(&a.model)?;
    let data = load_data(&a.data, Split::Train)?;
    let cluster = parse_cluster(&a.cluster)?;
    let subset = match cluster {
        ClusterId::All => data,
        ClusterId::Cluster(id) => {
            let path = a.clusters.as_ref().ok_or_else(|| Error::invalid("--clusters is required for a cluster id"))?;
            let map = load_clusters(path, &model)?;
            let c = map.by_id(id).ok_or_else(|| Error::invalid(format!("no cluster {id} in the map")))?;
            data.filter_classes(&c.classes)
        }
    };
    let config = ScoringConfig { criterion: a.criterion.into(), k_prime: a.probe.k_prime, probe: a.probe.config() };
    let table = score_layer(&model, a.layer, &subset, &config)?.with_cluster(cluster);
    let path = dir.join(format!("scores_{}_l{}_{}.json", cluster, a.layer, table.criterion));
    table.save(&path)?;
    println!("{}", table.to_json()?);
    Ok(())
}

fn extraction_config(split_layer: usize, epsilon: f64, criterion: CriterionArg, probe: &ProbeFlags) -> ExtractionConfig {
    let mut c = ExtractionConfig::new(split_layer);
    c.epsilon = epsilon;
    c.criterion = criterion.into();
    c.k_prime = probe.k_prime;
    c.probe = probe.config();
    c
}

fn extract_one(a: &ExtractArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "extract", a)?;
    let model = io::load_model(&a.model)?;
    let train = load_data(&a.train, Split::Train)?;
    let val = load_data(&a.val, Split::Val)?;
    let map = load_clusters(&a.clusters, &model)?;
    let c = map.by_id(a.cluster).ok_or_else(|| Error::invalid(format!("no cluster {} in the map", a.cluster)))?;
    let score_set = train.filter_classes(&c.classes);
    let eval_data = val.filter_classes(&c.classes);
    if eval_data.is_empty() {
        return Err(Error::invalid(format!("cluster {} has no held-out samples", a.cluster)));
    }
    let eval = EvalSet::new(&model, &eval_data, a.split_layer)?;
    let id = ClusterId::Cluster(c.id);
    let full = SubgraphAnnotation::full(&model, id, a.split_layer)?;
    let (base, _) = extract::subgraph_accuracy(&model, &full, &eval, &c.classes)?;
    let mut config = extraction_config(a.split_layer, a.epsilon, a.criterion, &a.probe).with_retention(a.r_last, a.r_split);
    config.tau_acc = a.tau_acc.unwrap_or_else(|| extract::derive_tau(base, a.epsilon));
    let e = extract::extract_subgraph(&model, id, &c.classes, &score_set, &eval, &config, &mut ScoreCache::new())?;
    e.annotation.save(dir.join(format!("cluster_{}.json", c.id)))?;
    println!(
        "cluster {}: accuracy {:.4} (restricted {:.4}, base {:.4}), MACs {} of {}, accepted {}",
        c.id,
        e.accuracy,
        e.restricted_accuracy,
        base,
        e.mac_count,
        mac_count(&model, None)?,
        e.accepted
    );
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "sweep", a)?;
    let model = io::load_model(&a.model)?;
    let train = load_data(&a.train, Split::Train)?;
    let val = load_data(&a.val, Split::Val)?;
    let map = load_clusters(&a.clusters, &model)?;
    let mut grid = match a.grid {
        GridArg::Default => SweepGrid::default(),
        GridArg::Complemented => SweepGrid::complemented(),
    };
    if !a.r_last.is_empty() {
        grid.r_last = a.r_last.clone();
    }
    if !a.r_split.is_empty() {
        grid.r_split = a.r_split.clone();
    }
    let clusters = ClusterData::for_clusters(&model, &map, &train, &val, a.split_layer)?;
    let mean_base = clusters.iter().map(|c| c.base_accuracy).sum::<f64>() / clusters.len() as f64;
    let config = extraction_config(a.split_layer, a.epsilon, a.criterion, &a.probe).with_derived_tau(mean_base);
    let result = extract::sweep_extract(&model, &clusters, &grid, &config, &mut ScoreCache::new())?;
    result.save_csv(dir.join("sweep.csv"))?;
    let ann_dir = dir.join("annotations");
    fs::create_dir_all(&ann_dir)?;
    let routable = result.routable_annotations(&clusters);
    for ann in &routable {
        ann.save(ann_dir.join(format!("cluster_{}.json", ann.cluster_id)))?;
    }
    let summary = serde_json::json!({
        "tau_acc": result.tau_acc,
        "epsilon": result.epsilon,
        "mean_base_accuracy": mean_base,
        "points": result.points.len(),
        "accepted_points": result.accepted().count(),
        "best": result.best_point().map(|p| serde_json::json!({
            "r_L": p.r_last, "r_M": p.r_split, "accuracy": p.avg_accuracy, "mac_count": p.avg_mac_count
        })),
        "pareto": result.pareto.iter().map(|&i| {
            let p = &result.points[i];
            serde_json::json!({"r_L": p.r_last, "r_M": p.r_split, "accuracy": p.avg_accuracy, "mac_count": p.avg_mac_count})
        }).collect::<Vec<_>>(),
        "routable_clusters": routable.iter().map(|a| a.cluster_id.to_string()).collect::<Vec<_>>(),
    });
    write_json(&dir.join("sweep_summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn parse_layer_rates(items: &[String]) -> Result<BTreeMap<usize, f64>> {
    items
        .iter()
        .map(|s| {
            let (l, r) = s.split_once('=').ok_or_else(|| Error::invalid(format!("'{s}' is not LAYER=RATE")))?;
            let l = l.trim().parse().map_err(|_| Error::invalid(format!("bad layer in '{s}'")))?;
            let r = r.trim().parse().map_err(|_| Error::invalid(format!("bad rate in '{s}'")))?;
            Ok((l, r))
        })
        .collect()
}

fn prune(a: &PruneArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "prune", a)?;
    let model = io::load_model(&a.model)?;
    let data = load_data(&a.data, Split::Train)?;
    let mut retention: BTreeMap<usize, f64> =
        model.conv_layers().into_iter().filter(|&l| l >= a.split_layer).map(|l| (l, a.retention)).collect();
    retention.extend(parse_layer_rates(&a.layer_retention)?);
    let config = ScoringConfig { criterion: a.criterion.into(), k_prime: a.probe.k_prime, probe: a.probe.config() };
    let mut ann = extract::prune_global(&model, &data, &retention, &config)?;
    if let Some(eval) = &a.eval {
        let eval = load_data(eval, Split::Test)?;
        let set = EvalSet::new(&model, &eval, ann.split_layer)?;
        let full = SubgraphAnnotation::full(&model, ClusterId::All, ann.split_layer)?;
        let (base, _) = extract::subgraph_accuracy(&model, &full, &set, &[])?;
        let (acc, _) = extract::subgraph_accuracy(&model, &ann, &set, &[])?;
        ann.recorded_accuracy = acc;
        println!("accuracy {acc:.4} (unpruned {base:.4})");
    }
    ann.save(dir.join("pruned_all.json"))?;
    println!("MACs {} of {}", mac_count(&model, Some(&ann))?, mac_count(&model, None)?);
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "infer", a)?;
    let (router, data) = build_router(&a.router, a.alpha)?;
    let n = a.limit.unwrap_or(data.len()).min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let data = data.subset(&idx)?;
    let results = router.infer_batch(data.images())?;
    let clusters = match &a.router.clusters {
        Some(p) => Some(load_clusters(p, router.model())?),
        None => None,
    };
    router::write_routing_trace(create(&dir.join("routing_trace.csv"))?, &results, data.labels(), clusters.as_ref(), a.alpha)?;
    let preds: Vec<usize> = results.iter().map(|r| r.prediction).collect();
    let routed = results.iter().filter(|r| r.decision.routed).count();
    let macs = results.iter().map(|r| r.macs as f64).sum::<f64>() / n.max(1) as f64;
    println!(
        "accuracy {:.4}, routed {:.3}, mean MACs {:.0} (full model {})",
        crate::model::accuracy_of(&preds, data.labels()),
        routed as f64 / n.max(1) as f64,
        macs,
        router.full_macs()
    );
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "bench", a)?;
    let (router, data) = build_router(&a.router, 1.0)?;
    let report = analysis::threshold_sweep(&router, &a.alphas, &data, a.repetitions, a.warmup, a.latency_samples)?;
    report.write_records(create(&dir.join("bench.csv"))?)?;
    report.write_traces(create(&dir.join("route_traces.csv"))?)?;
    report.write_cdf(create(&dir.join("confidence_cdf.csv"))?)?;
    if let Some(path) = &a.router.clusters {
        let map = load_clusters(path, router.model())?;
        let annotations = load_annotations(&a.router.annotations, router.model())?;
        let rows = analysis::per_cluster_eval(router.model(), &annotations, &map, &data, router.split_layer())?;
        analysis::write_cluster_eval(create(&dir.join("cluster_eval.csv"))?, &rows)?;
    }
    for r in &report.records {
        println!(
            "{:<10} accuracy {:.4} routed {:.3} MACs {:>10.0} median {:.3} ms",
            r.scenario,
            r.accuracy,
            r.routed_fraction,
            r.mac_count,
            r.latency_median_s * 1e3
        );
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "analyze", a)?;
    let model = io::load_model(&a.model)?;
    let data = load_data(&a.data, Split::Test)?;
    let map = load_clusters(&a.clusters, &model)?;
    let layers = if a.layers.is_empty() { model.conv_layers() } else { a.layers.clone() };
    let top_k = a.top_k.unwrap_or_else(|| analysis::default_top_k(model.num_classes()));
    let classes = data.classes_present();
    let to_cluster = map.class_to_cluster(model.num_classes());

    let mut patterns = csv::Writer::from_path(dir.join("activation_patterns.csv"))?;
    patterns.write_record(["layer", "class", "filter", "value"])?;
    let mut summary = Vec::new();
    for &layer in &layers {
        for &c in &classes {
            for (f, v) in analysis::activation_pattern(&model, layer, c, &data)?.iter().enumerate() {
                patterns.write_record([layer.to_string(), c.to_string(), f.to_string(), v.to_string()])?;
            }
        }
        let profile = SharingProfile::compute(&model, layer, &data, a.quantile, top_k)?;
        let mut matrix = csv::Writer::from_path(dir.join(format!("sharing_l{layer}.csv")))?;
        let mut header = vec!["class".to_string()];
        header.extend(classes.iter().map(|c| c.to_string()));
        matrix.write_record(&header)?;
        let (mut within, mut cross) = (Vec::new(), Vec::new());
        for &x in &classes {
            let mut row = vec![x.to_string()];
            for &y in &classes {
                let s = profile.similarity(x, y);
                row.push(s.to_string());
                if x < y {
                    if to_cluster[x] == to_cluster[y] {
                        within.push(s);
                    } else {
                        cross.push(s);
                    }
                }
            }
            matrix.write_record(&row)?;
        }
        matrix.flush()?;
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        summary.push(serde_json::json!({
            "layer": layer, "within_cluster_mean": mean(&within), "cross_cluster_mean": mean(&cross),
            "within_pairs": within.len(), "cross_pairs": cross.len(),
        }));
        println!("layer {layer:>3}: within-cluster sharing {:.4}, cross-cluster {:.4}", mean(&within), mean(&cross));
    }
    patterns.flush()?;
    write_json(&dir.join("sharing_summary.json"), &summary)?;
    Ok(())
}

fn export(a: &ExportFeaturesArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "export-features", a)?;
    let model = io::load_model(&a.model)?;
    let data = load_data(&a.data, Split::Test)?;
    let map = load_clusters(&a.clusters, &model)?;
    let path = a.output.clone().unwrap_or_else(|| dir.join(format!("features_l{}.csv", a.layer)));
    let rows = analysis::export_features(&model, a.layer, &data, &map, a.k_prime, &path)?;
    println!("wrote {rows} rows to {}", path.display());
    Ok(())
}

fn run_pipeline(a: &PipelineArgs) -> Result<()> {
    let dir = a.out.resolve()?;
    snapshot(&dir, "pipeline", a)?;
    let config: PipelineConfig = match &a.settings {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).at(p)?)?,
        None => PipelineConfig::default(),
    };
    let out = pipeline::run(&config, Some(&dir))?;
    println!("{}", serde_json::to_string_pretty(&out.report)?);
    Ok(())
}

/// Exit status for an error: 2 for I/O failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_io() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
