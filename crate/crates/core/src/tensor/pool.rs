use super::{image_dims, image_shape, Tensor};
use crate::error::{Error, Result};

/// Half-open input range `[floor(i*len/out), floor((i+1)*len/out))` feeding
/// output cell `i` of an adaptive pool.
pub fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

fn check_adaptive(op: &'static str, h: usize, w: usize, out_size: usize) -> Result<()> {
    if out_size == 0 || out_size > h || out_size > w {
        return Err(Error::invalid(format!(
            "{op}: output size {out_size} must be in 1..={} for a {h}x{w} map",
            h.min(w)
        )));
    }
    Ok(())
}

/// Average pooling onto a fixed `out_size x out_size` grid.
pub fn adaptive_avg_pool(input: &Tensor, out_size: usize) -> Result<Tensor> {
    let (n, c, h, w) = image_dims("adaptive_avg_pool", input)?;
    check_adaptive("adaptive_avg_pool", h, w, out_size)?;
    let k = out_size;
    let mut out = Vec::with_capacity(n * c * k * k);
    for plane in input.data().chunks_exact(h * w) {
        for i in 0..k {
            let (y0, y1) = pool_window(i, h, k);
            for j in 0..k {
                let (x0, x1) = pool_window(j, w, k);
                let mut s = 0f32;
                for y in y0..y1 {
                    s += plane[y * w + x0..y * w + x1].iter().sum::<f32>();
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f32);
            }
        }
    }
    Tensor::new(image_shape(input, n, c, k, k), out)
}

/// Spreads each output gradient uniformly over its pooling window.
pub fn adaptive_avg_pool_backward(upstream: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (n, c, h, w) = image_dims("adaptive_avg_pool_backward", &probe)?;
    let k = match *upstream.shape() {
        [_, k, k2] | [_, _, k, k2] if k == k2 => k,
        _ => {
            return Err(Error::shape(
                "adaptive_avg_pool_backward",
                format!("upstream {:?} is not a square pooled map", upstream.shape()),
            ))
        }
    };
    check_adaptive("adaptive_avg_pool_backward", h, w, k)?;
    if upstream.shape() != image_shape(&probe, n, c, k, k).as_slice() {
        return Err(Error::shape(
            "adaptive_avg_pool_backward",
            format!("upstream {:?} vs input {input_shape:?}", upstream.shape()),
        ));
    }
    let mut dx = vec![0f32; n * c * h * w];
    for (plane, up) in dx.chunks_exact_mut(h * w).zip(upstream.data().chunks_exact(k * k)) {
        for i in 0..k {
            let (y0, y1) = pool_window(i, h, k);
            for j in 0..k {
                let (x0, x1) = pool_window(j, w, k);
                let g = up[i * k + j] / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for v in &mut plane[y * w + x0..y * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = image_dims("maxpool2", input)?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape("maxpool2", format!("input {:?} is smaller than 2x2", input.shape())));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for i in 0..oh {
            let r0 = &plane[2 * i * w..];
            let r1 = &plane[(2 * i + 1) * w..];
            for j in 0..ow {
                out.push(r0[2 * j].max(r0[2 * j + 1]).max(r1[2 * j].max(r1[2 * j + 1])));
            }
        }
    }
    Tensor::new(image_shape(input, n, c, oh, ow), out)
}

/// Routes each output gradient to the first maximal input of its window.
pub fn maxpool2_backward(upstream: &Tensor, saved_input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = image_dims("maxpool2_backward", saved_input)?;
    let (oh, ow) = (h / 2, w / 2);
    if upstream.shape() != image_shape(saved_input, n, c, oh, ow).as_slice() {
        return Err(Error::shape(
            "maxpool2_backward",
            format!("upstream {:?} vs input {:?}", upstream.shape(), saved_input.shape()),
        ));
    }
    let mut dx = vec![0f32; saved_input.len()];
    for ((plane, dplane), up) in saved_input
        .data()
        .chunks_exact(h * w)
        .zip(dx.chunks_exact_mut(h * w))
        .zip(upstream.data().chunks_exact(oh * ow))
    {
        for i in 0..oh {
            for j in 0..ow {
                let cands = [
                    2 * i * w + 2 * j,
                    2 * i * w + 2 * j + 1,
                    (2 * i + 1) * w + 2 * j,
                    (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &idx in &cands[1..] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                dplane[best] += up[i * ow + j];
            }
        }
    }
    Tensor::new(saved_input.shape().to_vec(), dx)
}
