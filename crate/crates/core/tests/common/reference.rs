//! Slow, obviously-correct implementations used as test oracles.

#![allow(dead_code)]

use semroute::model::{LayerKind, ModelGraph, SubgraphAnnotation};
use semroute::Tensor;

/// Direct nested-loop convolution of one `[C, H, W]` image with f64 accumulation.
pub fn slow_conv2d(x: &[f32], shape: [usize; 3], w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<f32>, [usize; 3]) {
    let [c, h, wd] = shape;
    let ws = w.shape();
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    assert_eq!(ws[1], c);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0f32; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = f64::from(b.data()[o]);
                for i in 0..c {
                    for p in 0..kh {
                        for q in 0..kw {
                            let iy = (y * stride + p) as isize - pad as isize;
                            let ix = (xo * stride + q) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x[(i * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((o * c + i) * kh + p) * kw + q];
                            acc += f64::from(xv) * f64::from(wv);
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc as f32;
            }
        }
    }
    (out, [co, oh, ow])
}

/// Runs one sample through `model` with slow layer implementations. When
/// `annotation` is given, conv outputs outside the retained set are forced to
/// zero from the split layer on (bias included).
pub fn zero_filter_forward(model: &ModelGraph, image: &[f32], annotation: Option<&SubgraphAnnotation>) -> Vec<f32> {
    let mut shape: Vec<usize> = model.input_shape().to_vec();
    let mut x: Vec<f32> = image.to_vec();
    for (l, layer) in model.layers().iter().enumerate() {
        match &layer.kind {
            LayerKind::Conv2d { weight, bias, stride, padding } => {
                let (y, s) = slow_conv2d(&x, [shape[0], shape[1], shape[2]], weight, bias, *stride, *padding);
                x = y;
                shape = s.to_vec();
                if let Some(kept) = annotation.and_then(|a| a.retained.get(&l)) {
                    let hw = shape[1] * shape[2];
                    for ch in 0..shape[0] {
                        if !kept.contains(&ch) {
                            x[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
            }
            LayerKind::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::MaxPool2 => {
                let (c, h, w) = (shape[0], shape[1] / 2, shape[2] / 2);
                let mut y = vec![0f32; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let at = |di: usize, dj: usize| x[(ch * shape[1] + 2 * i + di) * shape[2] + 2 * j + dj];
                            y[(ch * h + i) * w + j] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                        }
                    }
                }
                x = y;
                shape = vec![c, h, w];
            }
            LayerKind::AdaptiveAvgPool { out_size } => {
                let k = *out_size;
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut y = vec![0f32; c * k * k];
                for ch in 0..c {
                    for i in 0..k {
                        for j in 0..k {
                            let (y0, y1) = (i * h / k, (i + 1) * h / k);
                            let (x0, x1) = (j * w / k, (j + 1) * w / k);
                            let mut s = 0f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    s += f64::from(x[(ch * h + yy) * w + xx]);
                                }
                            }
                            y[(ch * k + i) * k + j] = (s / ((y1 - y0) * (x1 - x0)) as f64) as f32;
                        }
                    }
                }
                x = y;
                shape = vec![c, k, k];
            }
            LayerKind::Flatten => shape = vec![x.len()],
            LayerKind::Dense { weight, bias } => {
                let [o, d] = *weight.shape() else { unreachable!() };
                x = (0..o)
                    .map(|r| {
                        let mut acc = f64::from(bias.data()[r]);
                        for j in 0..d {
                            acc += f64::from(weight.data()[r * d + j]) * f64::from(x[j]);
                        }
                        acc as f32
                    })
                    .collect();
                shape = vec![o];
            }
            LayerKind::Softmax => {
                let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let e: Vec<f64> = x.iter().map(|v| f64::from(v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                x = e.iter().map(|v| (v / s) as f32).collect();
            }
        }
    }
    x
}

/// Counts the multiplications a compact masked execution performs for one
/// input: every kernel tap of every kept filter over every active input
/// channel (padding taps included), and every dense weight read.
pub fn count_masked_multiplies(model: &ModelGraph, annotation: Option<&SubgraphAnnotation>) -> u64 {
    let mut shape: Vec<usize> = model.input_shape().to_vec();
    let mut active: Vec<bool> = vec![true; shape[0]];
    let mut active_features: Option<Vec<bool>> = None;
    let mut count = 0u64;
    for (l, layer) in model.layers().iter().enumerate() {
        match &layer.kind {
            LayerKind::Conv2d { weight, stride, padding, .. } => {
                let ws = weight.shape();
                let oh = (shape[1] + 2 * padding - ws[2]) / stride + 1;
                let ow = (shape[2] + 2 * padding - ws[3]) / stride + 1;
                let kept: Vec<bool> = match annotation.and_then(|a| a.retained.get(&l)) {
                    Some(k) => (0..ws[0]).map(|f| k.contains(&f)).collect(),
                    None => vec![true; ws[0]],
                };
                for (o, &ko) in kept.iter().enumerate() {
                    let _ = o;
                    if !ko {
                        continue;
                    }
                    for _y in 0..oh {
                        for _x in 0..ow {
                            for &ai in &active {
                                if ai {
                                    for _p in 0..ws[2] * ws[3] {
                                        count += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                active = kept;
                shape = vec![ws[0], oh, ow];
            }
            LayerKind::MaxPool2 => shape = vec![shape[0], shape[1] / 2, shape[2] / 2],
            LayerKind::AdaptiveAvgPool { out_size } => shape = vec![shape[0], *out_size, *out_size],
            LayerKind::Flatten => {
                let spatial = shape[1] * shape[2];
                active_features = Some(active.iter().flat_map(|&a| std::iter::repeat_n(a, spatial)).collect());
                shape = vec![shape.iter().product()];
            }
            LayerKind::Dense { weight, .. } => {
                let [o, d] = *weight.shape() else { unreachable!() };
                let feats = active_features.take().unwrap_or_else(|| vec![true; d]);
                for _ in 0..o {
                    for &f in &feats {
                        if f {
                            count += 1;
                        }
                    }
                }
                shape = vec![o];
            }
            _ => {}
        }
    }
    count
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &[f32], h: f32, mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * f64::from(h))
        })
        .collect()
}

/// `||a - n|| / max(||a||, ||n||)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (f64::from(*a) - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// `Σ r_i * out_i` in f64: a scalar loss whose gradient with respect to `out` is `r`.
pub fn weighted_sum(out: &[f32], r: &[f32]) -> f64 {
    out.iter().zip(r).map(|(o, w)| f64::from(*o) * f64::from(*w)).sum()
}

/// Central differences in f64 for a loss evaluated by an f64 reference forward.
pub fn numeric_gradient64(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub fn dot64(a: &[f64], r: &[f32]) -> f64 {
    a.iter().zip(r).map(|(a, r)| a * f64::from(*r)).sum()
}

/// NCHW convolution in f64; returns the output and its spatial size.
#[allow(clippy::too_many_arguments)]
pub fn conv2d64(
    x: &[f64],
    [n, c, h, wd]: [usize; 4],
    w: &[f64],
    [co, kh, kw]: [usize; 3],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * co * oh * ow);
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for i in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let iy = (y * stride + p) as isize - pad as isize;
                                let ix = (xo * stride + q) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((s * c + i) * h + iy as usize) * wd + ix as usize] * w[((o * c + i) * kh + p) * kw + q];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn dense64(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let o = b.len();
    let mut out = Vec::with_capacity(n * o);
    for s in 0..n {
        for j in 0..o {
            out.push(b[j] + (0..din).map(|k| x[s * din + k] * w[j * din + k]).sum::<f64>());
        }
    }
    out
}

pub fn relu64(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn maxpool64(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for plane in x.chunks_exact(h * w) {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |y: usize, x: usize| plane[y * w + x];
                out.push(at(2 * i, 2 * j).max(at(2 * i, 2 * j + 1)).max(at(2 * i + 1, 2 * j)).max(at(2 * i + 1, 2 * j + 1)));
            }
        }
    }
    out
}

pub fn adaptive_avg_pool64(x: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for plane in x.chunks_exact(h * w) {
        for i in 0..k {
            let (y0, y1) = (i * h / k, (i + 1) * h / k);
            for j in 0..k {
                let (x0, x1) = (j * w / k, (j + 1) * w / k);
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += plane[y * w + xx];
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn softmax64(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    out
}

/// Mean cross-entropy of softmax over rows of `x`.
pub fn cross_entropy64(x: &[f64], c: usize, targets: &[usize]) -> f64 {
    let rows: Vec<&[f64]> = x.chunks_exact(c).collect();
    let total: f64 = rows
        .iter()
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t]
        })
        .sum();
    total / rows.len() as f64
}
