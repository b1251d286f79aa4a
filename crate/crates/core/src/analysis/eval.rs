use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::extract::{subgraph_accuracy, EvalSet};
use crate::model::{param_count, ClusterId, ClusterMap, Dataset, ModelGraph, SubgraphAnnotation};

/// Base versus subgraph accuracy for one cluster. Subgraph fields are `None`
/// when the cluster has no annotation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterEvalRow {
    pub cluster: usize,
    pub samples: usize,
    pub base_accuracy: f64,
    pub base_restricted_accuracy: f64,
    pub subgraph_accuracy: Option<f64>,
    pub subgraph_restricted_accuracy: Option<f64>,
    pub delta: Option<f64>,
    pub delta_restricted: Option<f64>,
    /// Parameters the subgraph reads over parameters of the full model.
    pub param_fraction: Option<f64>,
}

/// Evaluates each cluster's samples of `dataset` with the full model and with
/// its annotation, under all-class and cluster-restricted argmax.
pub fn per_cluster_eval(
    model: &ModelGraph,
    annotations: &[SubgraphAnnotation],
    clusters: &ClusterMap,
    dataset: &Dataset,
    split_layer: usize,
) -> Result<Vec<ClusterEvalRow>> {
    clusters.validate(model.num_classes())?;
    let full_params = param_count(model, None)? as f64;
    let mut rows = Vec::with_capacity(clusters.len());
    for c in &clusters.clusters {
        let data = dataset.filter_classes(&c.classes);
        if data.is_empty() {
            continue;
        }
        let own = annotations.iter().find(|a| a.cluster_id == ClusterId::Cluster(c.id));
        let split = own.map_or(split_layer, |a| a.split_layer);
        let eval = EvalSet::new(model, &data, split)?;
        let full = SubgraphAnnotation::full(model, ClusterId::Cluster(c.id), split)?;
        let (base, base_r) = subgraph_accuracy(model, &full, &eval, &c.classes)?;
        let mut row = ClusterEvalRow {
            cluster: c.id,
            samples: data.len(),
            base_accuracy: base,
            base_restricted_accuracy: base_r,
            subgraph_accuracy: None,
            subgraph_restricted_accuracy: None,
            delta: None,
            delta_restricted: None,
            param_fraction: None,
        };
        if let Some(a) = own {
            let (acc, acc_r) = subgraph_accuracy(model, a, &eval, &c.classes)?;
            row.subgraph_accuracy = Some(acc);
            row.subgraph_restricted_accuracy = Some(acc_r);
            row.delta = Some(acc - base);
            row.delta_restricted = Some(acc_r - base_r);
            row.param_fraction = Some(param_count(model, Some(a))? as f64 / full_params);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_cluster_eval(w: impl Write, rows: &[ClusterEvalRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}
