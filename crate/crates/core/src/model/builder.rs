use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerKind, LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Incrementally assembles a [`ModelGraph`], He-initialising weights from a seed.
///
/// ```
/// use semroute::model::ModelBuilder;
/// let model = ModelBuilder::new(&[3, 8, 8], 7)
///     .conv2d("conv1", 4, 3, 1, 1)
///     .relu()
///     .maxpool2()
///     .flatten()
///     .dense("fc", 5)
///     .build()
///     .unwrap();
/// assert_eq!(model.num_classes(), 5);
/// ```
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    rng: ChaCha8Rng,
    class_names: Option<Vec<String>>,
    error: Option<Error>,
}

impl ModelBuilder {
    pub fn new(input_shape: &[usize], seed: u64) -> Self {
        ModelBuilder {
            input_shape: input_shape.to_vec(),
            shape: input_shape.to_vec(),
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            class_names: None,
            error: None,
        }
    }

    fn push(mut self, layer: LayerSpec) -> Self {
        if self.error.is_some() {
            return self;
        }
        match layer.output_shape(&self.shape) {
            Ok(s) => {
                self.shape = s;
                self.layers.push(layer);
            }
            Err(e) => self.error = Some(e),
        }
        self
    }

    fn auto_name(&self, kind: &str) -> String {
        format!("{kind}{}", self.layers.len())
    }

    fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        Tensor::from_fn(shape, |_| normal.sample(&mut self.rng))
    }

    pub fn conv2d(mut self, name: &str, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let c_in = self.shape.first().copied().unwrap_or(0);
        let weight = self.he_normal(&[out_channels, c_in, kernel, kernel], c_in * kernel * kernel);
        let bias = Tensor::zeros(&[out_channels]);
        self.push(LayerSpec::new(name, LayerKind::Conv2d { weight, bias, stride, padding }))
    }

    pub fn dense(mut self, name: &str, out_features: usize) -> Self {
        let d = if self.shape.len() == 1 { self.shape[0] } else { 0 };
        let weight = self.he_normal(&[out_features, d], d);
        let bias = Tensor::zeros(&[out_features]);
        self.push(LayerSpec::new(name, LayerKind::Dense { weight, bias }))
    }

    pub fn relu(self) -> Self {
        let name = self.auto_name("relu");
        self.push(LayerSpec::new(name, LayerKind::Relu))
    }

    pub fn maxpool2(self) -> Self {
        let name = self.auto_name("pool");
        self.push(LayerSpec::new(name, LayerKind::MaxPool2))
    }

    pub fn adaptive_avg_pool(self, out_size: usize) -> Self {
        let name = self.auto_name("avgpool");
        self.push(LayerSpec::new(name, LayerKind::AdaptiveAvgPool { out_size }))
    }

    pub fn flatten(self) -> Self {
        let name = self.auto_name("flatten");
        self.push(LayerSpec::new(name, LayerKind::Flatten))
    }

    pub fn softmax(self) -> Self {
        let name = self.auto_name("softmax");
        self.push(LayerSpec::new(name, LayerKind::Softmax))
    }

    pub fn class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    /// Finishes the model; the last layer's width becomes the class count.
    pub fn build(self) -> Result<ModelGraph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let num_classes = match self.shape.as_slice() {
            [c] => *c,
            other => return Err(Error::invalid(format!("model must end in a vector, ends in {other:?}"))),
        };
        ModelGraph::new(self.input_shape, self.layers, num_classes, self.class_names)
    }
}
