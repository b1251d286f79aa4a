use super::gemm::{dot, gemm_nn, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

fn rows(op: &'static str, input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    let [o, d] = *weights.shape() else {
        return Err(Error::shape(op, format!("weights must be [O,D], got {:?}", weights.shape())));
    };
    let (n, din) = match *input.shape() {
        [d] => (1, d),
        [n, d] => (n, d),
        _ => return Err(Error::shape(op, format!("input must be [D] or [N,D], got {:?}", input.shape()))),
    };
    if din != d {
        return Err(Error::shape(
            op,
            format!("input {:?} has {din} features but weights {:?} expect {d}", input.shape(), weights.shape()),
        ));
    }
    Ok((n, o, d))
}

/// Affine map `weights * x + bias` for `x` of shape `[D]` or `[N, D]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, o, d) = rows("dense", input, weights)?;
    if bias.shape() != [o] {
        return Err(Error::shape("dense", format!("bias {:?} vs weights {:?}", bias.shape(), weights.shape())));
    }
    let mut out = Vec::with_capacity(n * o);
    for x in input.data().chunks_exact(d.max(1)).take(n) {
        for (wrow, &b) in weights.data().chunks_exact(d.max(1)).zip(bias.data()) {
            out.push(dot(x, wrow) + b);
        }
    }
    let shape = if input.ndim() == 1 { vec![o] } else { vec![n, o] };
    Tensor::new(shape, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(upstream: &Tensor, saved_input: &Tensor, weights: &Tensor) -> Result<DenseGrads> {
    let (n, o, d) = rows("dense_backward", saved_input, weights)?;
    let expected: &[usize] = if saved_input.ndim() == 1 { &[o] } else { &[n, o] };
    if upstream.shape() != expected {
        return Err(Error::shape(
            "dense_backward",
            format!("upstream {:?} but forward output would be {expected:?}", upstream.shape()),
        ));
    }
    let mut dx = vec![0f32; n * d];
    gemm_nn(n, o, d, upstream.data(), weights.data(), &mut dx);
    let mut dw = vec![0f32; o * d];
    gemm_tn(o, n, d, upstream.data(), saved_input.data(), &mut dw);
    let mut db = vec![0f32; o];
    for row in upstream.data().chunks_exact(o.max(1)) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(saved_input.shape().to_vec(), dx)?,
        weight: Tensor::new(vec![o, d], dw)?,
        bias: Tensor::new(vec![o], db)?,
    })
}
