//! Dense `f32` tensors and the hand-written forward/backward kernels built on them.
//!
//! Shapes are explicit: nothing broadcasts. Image-like ops accept either a single
//! sample `[C, H, W]` or a batch `[N, C, H, W]` and return the same rank they were
//! given. Batched calls process samples one after another with the exact code path
//! used for a single sample, so a batch result is bit-identical to the per-sample
//! results stacked.

mod activation;
mod conv;
mod dense;
pub mod gemm;
mod optim;
mod pool;

pub use activation::{
    cross_entropy, cross_entropy_backward, cross_entropy_batch, relu, relu_backward, softmax,
    softmax_backward,
};
pub use conv::{conv2d, conv2d_backward, conv2d_output_size, Conv2dGrads};
pub use dense::{dense, dense_backward, DenseGrads};
pub use optim::{sgd_step, sgd_update};
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_backward, maxpool2, maxpool2_backward, pool_window};

use crate::error::{Error, Result};

/// Row-major `f32` array with shape metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    /// One-dimensional tensor owning `data`.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of leading-axis entries (`N` of an `[N, ...]` tensor).
    pub fn outer_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Contiguous slice of the `i`-th entry along the leading axis.
    pub fn outer(&self, i: usize) -> &[f32] {
        let stride = self.data.len() / self.outer_len().max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    /// The `i`-th leading-axis entry as its own tensor.
    pub fn outer_tensor(&self, i: usize) -> Tensor {
        Tensor { shape: self.shape[1..].to_vec(), data: self.outer(i).to_vec() }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list of tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", first.shape, t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Rows `indices` of the leading axis, in the given order.
    pub fn select_outer(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.outer_len();
        let stride = self.data.len() / n.max(1);
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            0.0
        } else {
            (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
        }
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(values: &[f32]) -> usize {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = i;
            }
        }
        best
    }
}

/// A parameter together with the gradient accumulated for it.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, grad: Tensor) -> Result<Self> {
        if value.shape() != grad.shape() {
            return Err(Error::shape(
                "grad pair",
                format!("value {:?} vs grad {:?}", value.shape(), grad.shape()),
            ));
        }
        Ok(GradPair { value, grad })
    }

    pub fn zero_grad(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        GradPair { value, grad }
    }
}

/// Splits an image-like tensor into `(batch, c, h, w)`, accepting 3-D or 4-D input.
pub(crate) fn image_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [C,H,W] or [N,C,H,W], got {:?}", t.shape()))),
    }
}

/// Shape with the same rank as `like` for per-sample dims `(c, h, w)`.
pub(crate) fn image_shape(like: &Tensor, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.ndim() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}
