use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelGraph;
use crate::error::{AtPath, Error, Result};

pub const ANNOTATION_FORMAT_VERSION: u32 = 1;

/// Which data a subgraph was extracted for: one semantic cluster, or the whole
/// label set treated as a single macro-cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClusterId {
    Cluster(usize),
    All,
}

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterId::Cluster(c) => write!(f, "{c}"),
            ClusterId::All => f.write_str("ALL"),
        }
    }
}

impl Serialize for ClusterId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClusterId::Cluster(c) => s.serialize_u64(*c as u64),
            ClusterId::All => s.serialize_str("ALL"),
        }
    }
}

impl<'de> Deserialize<'de> for ClusterId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(c) => Ok(ClusterId::Cluster(c as usize)),
            Raw::Tag(t) if t == "ALL" => Ok(ClusterId::All),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown cluster id '{t}'"))),
        }
    }
}

/// Retained filters per prunable layer for one subgraph. This is the only
/// artifact a subgraph needs; weights stay in the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphAnnotation {
    pub format_version: u32,
    pub cluster_id: ClusterId,
    #[serde(rename = "split_layer_M")]
    pub split_layer: usize,
    #[serde(rename = "r_L")]
    pub r_last: f64,
    #[serde(rename = "r_M")]
    pub r_split: f64,
    pub recorded_accuracy: f64,
    pub retained: BTreeMap<usize, Vec<usize>>,
}

impl SubgraphAnnotation {
    /// Annotation keeping every filter of every conv layer from `split_layer` on.
    pub fn full(model: &ModelGraph, cluster_id: ClusterId, split_layer: usize) -> Result<Self> {
        let mut retained = BTreeMap::new();
        for l in model.conv_layers().into_iter().filter(|&l| l >= split_layer) {
            retained.insert(l, (0..model.conv_out_channels(l)?).collect());
        }
        let a = SubgraphAnnotation {
            format_version: ANNOTATION_FORMAT_VERSION,
            cluster_id,
            split_layer,
            r_last: 1.0,
            r_split: 1.0,
            recorded_accuracy: 0.0,
            retained,
        };
        a.validate(model)?;
        Ok(a)
    }

    /// Checks every structural invariant against `model`.
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("annotation for cluster {}: {msg}", self.cluster_id)));
        if self.format_version != ANNOTATION_FORMAT_VERSION {
            return bad(format!("format version {} (expected {ANNOTATION_FORMAT_VERSION})", self.format_version));
        }
        if self.split_layer >= model.len() {
            return bad(format!("split layer {} outside a {}-layer model", self.split_layer, model.len()));
        }
        for (name, r) in [("r_L", self.r_last), ("r_M", self.r_split)] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} = {r} outside (0, 1]"));
            }
        }
        for (&l, kept) in &self.retained {
            let Ok(c_out) = model.conv_out_channels(l) else {
                return bad(format!("layer {l} is not a conv layer of the model"));
            };
            if l < self.split_layer {
                return bad(format!("layer {l} precedes the split layer {}", self.split_layer));
            }
            if kept.is_empty() {
                return bad(format!("layer {l} retains no filters"));
            }
            if kept.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("layer {l} filter indices are not strictly increasing"));
            }
            if let Some(&max) = kept.last() {
                if max >= c_out {
                    return bad(format!("layer {l} filter {max} out of range for {c_out} filters"));
                }
            }
        }
        if let Some(last) = model.last_conv() {
            for l in model.conv_layers().into_iter().filter(|&l| l >= self.split_layer && l <= last) {
                if !self.retained.contains_key(&l) {
                    return bad(format!("prunable layer {l} has no entry"));
                }
            }
        }
        Ok(())
    }

    /// Fraction of filters kept at `layer`.
    pub fn retained_fraction(&self, model: &ModelGraph, layer: usize) -> Result<f64> {
        let c = model.conv_out_channels(layer)?;
        Ok(self.retained.get(&layer).map_or(c, Vec::len) as f64 / c as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: SubgraphAnnotation = serde_json::from_str(text)?;
        if a.format_version != ANNOTATION_FORMAT_VERSION {
            return Err(Error::format(
                "annotation",
                format!("format version {} (expected {ANNOTATION_FORMAT_VERSION})", a.format_version),
            ));
        }
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()?).at(path.as_ref())?;
        Ok(())
    }

    /// Loads an annotation and, when `model` is given, validates it against it.
    pub fn load(path: impl AsRef<Path>, model: Option<&ModelGraph>) -> Result<Self> {
        let a = Self::from_json(&std::fs::read_to_string(path.as_ref()).at(path.as_ref())?)?;
        if let Some(m) = model {
            a.validate(m)?;
        }
        Ok(a)
    }
}
