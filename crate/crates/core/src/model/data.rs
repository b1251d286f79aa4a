use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtPath, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Labelled images `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape("dataset", format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > u16::MAX as usize) {
            return Err(Error::invalid(format!("label {l} does not fit the u16 label format")));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Checks every label is below `num_classes`.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(l) => Err(Error::invalid(format!("label {l} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.split)
    }

    /// Samples whose label is in `classes`, keeping dataset order.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx).expect("indices come from this dataset")
    }

    /// Images `range` as a `[n, C, H, W]` batch with their labels.
    pub fn batch(&self, start: usize, end: usize) -> (Tensor, &[usize]) {
        let end = end.min(self.len());
        let idx: Vec<usize> = (start..end).collect();
        (self.images.select_outer(&idx).expect("range within dataset"), &self.labels[start..end])
    }

    /// Sorted distinct labels present.
    pub fn classes_present(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Binary layout: u32 N, C, H, W; N*C*H*W little-endian f32; N little-endian u16 labels.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for &d in self.images.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dataset extent exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.images.len() * 4 + self.len() * 2);
        for v in self.images.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u16).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, split: Split) -> Result<Dataset> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 {
            return Err(Error::format("dataset", "file shorter than its 16-byte header"));
        }
        let dims: Vec<usize> = bytes[..16]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(count) = count else {
            return Err(Error::format("dataset", format!("extents {dims:?} overflow")));
        };
        let want = 16 + count * 4 + dims[0] * 2;
        if bytes.len() != want {
            return Err(Error::format(
                "dataset",
                format!("extents {dims:?} need {want} bytes but the file has {}", bytes.len()),
            ));
        }
        let pixels = bytes[16..16 + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = bytes[16 + count * 4..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        Dataset::new(Tensor::new(dims, pixels)?, labels, split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref()).at(path.as_ref())?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        Dataset::read_from(std::io::BufReader::new(std::fs::File::open(path.as_ref()).at(path.as_ref())?), split)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub name: String,
    pub classes: Vec<usize>,
}

/// Assignment of class labels to semantic clusters. Must partition the label set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub clusters: Vec<Cluster>,
}

impl ClusterMap {
    /// Builds a map and checks it partitions `0..num_classes`.
    pub fn new(clusters: Vec<Cluster>, num_classes: usize) -> Result<Self> {
        let map = ClusterMap { clusters };
        map.validate(num_classes)?;
        Ok(map)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![false; num_classes];
        let mut ids = BTreeSet::new();
        for c in &self.clusters {
            if !ids.insert(c.id) {
                return Err(Error::invalid(format!("cluster id {} appears twice", c.id)));
            }
            if c.classes.is_empty() {
                return Err(Error::invalid(format!("cluster {} has no classes", c.id)));
            }
            for &k in &c.classes {
                if k >= num_classes {
                    return Err(Error::invalid(format!("cluster {} lists class {k} outside 0..{num_classes}", c.id)));
                }
                if std::mem::replace(&mut seen[k], true) {
                    return Err(Error::invalid(format!("class {k} belongs to more than one cluster")));
                }
            }
        }
        if let Some(k) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid(format!("class {k} is not assigned to any cluster")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Position (not id) of the cluster containing `class`.
    pub fn cluster_of(&self, class: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.classes.contains(&class))
    }

    pub fn by_id(&self, id: usize) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    /// Lookup table class -> cluster position.
    pub fn class_to_cluster(&self, num_classes: usize) -> Vec<usize> {
        (0..num_classes).map(|k| self.cluster_of(k).unwrap_or(usize::MAX)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?).at(path.as_ref())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let map: ClusterMap = serde_json::from_str(&std::fs::read_to_string(path.as_ref()).at(path.as_ref())?)?;
        map.validate(num_classes)?;
        Ok(map)
    }
}
