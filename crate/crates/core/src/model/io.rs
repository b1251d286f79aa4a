//! Model archives: a directory holding `manifest.json` plus one binary file per
//! tensor.
//!
//! Tensor file layout (little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "SINFTNSR"
//! 8       1           dtype code (0 = f32)
//! 9       1           ndim
//! 10      6           reserved, zero
//! 16      4 * ndim    extents (u32)
//! ...     4 * numel   row-major f32 payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, ModelGraph};
use crate::error::{AtPath, Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"SINFTNSR";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
    let mut out = Vec::with_capacity(16 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(ndim);
    out.extend_from_slice(&[0u8; 6]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("tensor extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let fail = |detail: String| Err(Error::format("tensor file", detail));
    if bytes.len() < 16 {
        return fail(format!("{} bytes is shorter than the 16-byte header", bytes.len()));
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return fail(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8])));
    }
    if bytes[8] != DTYPE_F32 {
        return fail(format!("unsupported dtype code {}", bytes[8]));
    }
    if bytes[10..16].iter().any(|&b| b != 0) {
        return fail("reserved header bytes are not zero".into());
    }
    let ndim = bytes[9] as usize;
    let header = 16 + 4 * ndim;
    if bytes.len() < header {
        return fail(format!("truncated extents: {ndim} dims need {header} header bytes"));
    }
    let shape: Vec<usize> = bytes[16..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let Some(numel) = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) else {
        return fail(format!("extents {shape:?} overflow"));
    };
    let want = header + 4 * numel;
    if bytes.len() != want {
        return fail(format!("shape {shape:?} needs {want} bytes, file has {}", bytes.len()));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub layers: Vec<LayerEntry>,
}

fn entry(index: usize, layer: &LayerSpec) -> LayerEntry {
    let mut e = LayerEntry {
        name: layer.name.clone(),
        kind: layer.kind_name().to_string(),
        in_channels: None,
        out_channels: None,
        kernel: None,
        stride: None,
        padding: None,
        in_features: None,
        out_features: None,
        out_size: None,
        weight_file: None,
        bias_file: None,
    };
    match &layer.kind {
        LayerKind::Conv2d { weight, stride, padding, .. } => {
            let s = weight.shape();
            e.out_channels = Some(s[0]);
            e.in_channels = Some(s[1]);
            e.kernel = Some([s[2], s[3]]);
            e.stride = Some(*stride);
            e.padding = Some(*padding);
        }
        LayerKind::Dense { weight, .. } => {
            e.out_features = Some(weight.shape()[0]);
            e.in_features = Some(weight.shape()[1]);
        }
        LayerKind::AdaptiveAvgPool { out_size } => e.out_size = Some(*out_size),
        _ => {}
    }
    if layer.params().is_some() {
        e.weight_file = Some(format!("{index:03}_{}.weight.bin", layer.name));
        e.bias_file = Some(format!("{index:03}_{}.bias.bin", layer.name));
    }
    e
}

/// Writes `model` as an archive directory (created if missing).
pub fn save_model(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).at(dir)?;
    let mut layers = Vec::with_capacity(model.len());
    for (i, layer) in model.layers().iter().enumerate() {
        let e = entry(i, layer);
        if let (Some((w, b)), Some(wf), Some(bf)) = (layer.params(), &e.weight_file, &e.bias_file) {
            std::fs::write(dir.join(wf), encode_tensor(w)?).at(&dir.join(wf))?;
            std::fs::write(dir.join(bf), encode_tensor(b)?).at(&dir.join(bf))?;
        }
        layers.push(e);
    }
    let manifest = Manifest {
        format_version: MODEL_FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        num_classes: model.num_classes(),
        class_names: model.class_names().map(<[String]>::to_vec),
        layers,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?).at(&dir.join("manifest.json"))?;
    Ok(())
}

fn required<T: Copy>(v: Option<T>, layer: &str, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::format("manifest", format!("layer '{layer}' is missing '{field}'")))
}

fn load_param(dir: &Path, file: Option<&String>, layer: &str, field: &str, want: &[usize]) -> Result<Tensor> {
    let file = file.ok_or_else(|| Error::format("manifest", format!("layer '{layer}' is missing '{field}'")))?;
    let bytes = std::fs::read(dir.join(file)).at(&dir.join(file))?;
    let t = decode_tensor(&bytes).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format("tensor file", format!("{file}: {detail}")),
        other => other,
    })?;
    if t.shape() != want {
        return Err(Error::format(
            "manifest",
            format!("layer '{layer}' declares {want:?} but {file} holds {:?}", t.shape()),
        ));
    }
    Ok(t)
}

/// Loads and fully validates an archive. Nothing is returned unless every
/// tensor decodes and the assembled graph passes shape checks.
pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).at(&dir.join("manifest.json"))?)?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::format(
            "manifest",
            format!("format version {} (expected {MODEL_FORMAT_VERSION})", manifest.format_version),
        ));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for e in &manifest.layers {
        let n = e.name.as_str();
        let kind = match e.kind.as_str() {
            "conv2d" => {
                let (o, i) = (required(e.out_channels, n, "out_channels")?, required(e.in_channels, n, "in_channels")?);
                let [kh, kw] = required(e.kernel, n, "kernel")?;
                LayerKind::Conv2d {
                    weight: load_param(dir, e.weight_file.as_ref(), n, "weight_file", &[o, i, kh, kw])?,
                    bias: load_param(dir, e.bias_file.as_ref(), n, "bias_file", &[o])?,
                    stride: required(e.stride, n, "stride")?,
                    padding: required(e.padding, n, "padding")?,
                }
            }
            "dense" => {
                let (o, i) = (required(e.out_features, n, "out_features")?, required(e.in_features, n, "in_features")?);
                LayerKind::Dense {
                    weight: load_param(dir, e.weight_file.as_ref(), n, "weight_file", &[o, i])?,
                    bias: load_param(dir, e.bias_file.as_ref(), n, "bias_file", &[o])?,
                }
            }
            "relu" => LayerKind::Relu,
            "maxpool2" => LayerKind::MaxPool2,
            "flatten" => LayerKind::Flatten,
            "softmax" => LayerKind::Softmax,
            "adaptive_avg_pool" => LayerKind::AdaptiveAvgPool { out_size: required(e.out_size, n, "out_size")? },
            other => return Err(Error::format("manifest", format!("layer '{n}' has unknown kind '{other}'"))),
        };
        layers.push(LayerSpec::new(n, kind));
    }
    ModelGraph::new(manifest.input_shape, layers, manifest.num_classes, manifest.class_names)
}
