use std::io::Write;
use std::path::Path;

use crate::error::{AtPath, Result};
use crate::model::{ClusterMap, Dataset, ModelGraph};
use crate::probe::collect_features;

/// Writes `label, cluster, f0, f1, ...` per sample: the pooled post-activation
/// features of conv `layer` with `k_prime x k_prime` cells per filter.
pub fn write_features(
    w: impl Write,
    model: &ModelGraph,
    layer: usize,
    dataset: &Dataset,
    clusters: &ClusterMap,
    k_prime: usize,
) -> Result<usize> {
    let features = collect_features(model, layer, dataset, k_prime)?;
    let to_cluster = clusters.class_to_cluster(model.num_classes());
    let dim = features.feature_dim();
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["label".to_string(), "cluster".to_string()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    csv.write_record(&header)?;
    for (i, &label) in dataset.labels().iter().enumerate() {
        let cluster = clusters.clusters.get(to_cluster[label]).map_or(usize::MAX, |c| c.id);
        let mut rec = vec![label.to_string(), cluster.to_string()];
        rec.extend(features.rows.outer(i).iter().map(|v| v.to_string()));
        csv.write_record(&rec)?;
    }
    csv.flush()?;
    Ok(dataset.len())
}

pub fn export_features(
    model: &ModelGraph,
    layer: usize,
    dataset: &Dataset,
    clusters: &ClusterMap,
    k_prime: usize,
    path: impl AsRef<Path>,
) -> Result<usize> {
    write_features(std::fs::File::create(path.as_ref()).at(path.as_ref())?, model, layer, dataset, clusters, k_prime)
}
