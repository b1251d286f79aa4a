//! Finite-difference checks for every backward op, parameterised by a shape
//! seed and a data seed so suites can sweep both.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use semroute::tensor::{self, Tensor};

use super::reference::{
    adaptive_avg_pool64, conv2d64, cross_entropy64, dense64, dot64, maxpool64, numeric_gradient64, relative_error, relu64, softmax64, widen,
};
use super::{random_tensor, rng};

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

pub const OPS: [&str; 7] = ["conv2d", "dense", "relu", "maxpool2", "adaptive_avg_pool", "softmax", "cross_entropy"];

/// Worst relative error over all gradients `op` returns for one case.
pub fn check(op: &str, shape_seed: u64, data_seed: u64) -> f64 {
    let mut s = rng(shape_seed.wrapping_mul(7919).wrapping_add(op.len() as u64));
    let mut d = rng(data_seed.wrapping_mul(104_729).wrapping_add(shape_seed));
    match op {
        "conv2d" => conv(&mut s, &mut d),
        "dense" => dense(&mut s, &mut d),
        "relu" => relu(&mut s, &mut d),
        "maxpool2" => maxpool(&mut s, &mut d),
        "adaptive_avg_pool" => adaptive(&mut s, &mut d),
        "softmax" => softmax(&mut s, &mut d),
        "cross_entropy" => cross_entropy(&mut s, &mut d),
        other => panic!("unknown op {other}"),
    }
}

type R = rand_chacha::ChaCha8Rng;

/// Gradient of `Σ r·f(x)` by f64 central differences, `f` an f64 reference forward.
fn fd(x: &Tensor, r: &[f32], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    numeric_gradient64(&widen(x.data()), f64::from(STEP), |v| dot64(&f(v), r))
}

fn conv(s: &mut R, d: &mut R) -> f64 {
    let n = s.random_range(1..=2);
    let c_in = s.random_range(1..=3);
    let c_out = s.random_range(1..=3);
    let k = s.random_range(1..=3);
    let stride = s.random_range(1..=2);
    let pad = s.random_range(0..=1);
    let h = s.random_range(k.max(3)..=6);
    let w = s.random_range(k.max(3)..=6);
    let x = random_tensor(&[n, c_in, h, w], d);
    let wt = random_tensor(&[c_out, c_in, k, k], d);
    let b = random_tensor(&[c_out], d);
    let y = tensor::conv2d(&x, &wt, &b, stride, pad).unwrap();
    let r = random_tensor(y.shape(), d);
    let g = tensor::conv2d_backward(&r, &x, &wt, stride, pad).unwrap();
    let (x64, w64, b64) = (widen(x.data()), widen(wt.data()), widen(b.data()));
    let geo = [n, c_in, h, w];
    let kgeo = [c_out, k, k];
    let e_in = relative_error(g.input.data(), &fd(&x, r.data(), |v| conv2d64(v, geo, &w64, kgeo, &b64, stride, pad)));
    let e_w = relative_error(g.weight.data(), &fd(&wt, r.data(), |v| conv2d64(&x64, geo, v, kgeo, &b64, stride, pad)));
    let e_b = relative_error(g.bias.data(), &fd(&b, r.data(), |v| conv2d64(&x64, geo, &w64, kgeo, v, stride, pad)));
    e_in.max(e_w).max(e_b)
}

fn dense(s: &mut R, d: &mut R) -> f64 {
    let n = s.random_range(1..=4);
    let din = s.random_range(1..=8);
    let o = s.random_range(1..=6);
    let x = random_tensor(&[n, din], d);
    let wt = random_tensor(&[o, din], d);
    let b = random_tensor(&[o], d);
    let r = random_tensor(&[n, o], d);
    let g = tensor::dense_backward(&r, &x, &wt).unwrap();
    let (x64, w64, b64) = (widen(x.data()), widen(wt.data()), widen(b.data()));
    let e_in = relative_error(g.input.data(), &fd(&x, r.data(), |v| dense64(v, n, din, &w64, &b64)));
    let e_w = relative_error(g.weight.data(), &fd(&wt, r.data(), |v| dense64(&x64, n, din, v, &b64)));
    let e_b = relative_error(g.bias.data(), &fd(&b, r.data(), |v| dense64(&x64, n, din, &w64, v)));
    e_in.max(e_w).max(e_b)
}

/// Values whose magnitude keeps finite differences away from the ReLU kink.
fn away_from_zero(shape: &[usize], d: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = d.random_range(0.05f32..1.0);
        if d.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn relu(s: &mut R, d: &mut R) -> f64 {
    let shape = [s.random_range(1..=3), s.random_range(1..=4), s.random_range(1..=5)];
    let x = away_from_zero(&shape, d);
    let r = random_tensor(&shape, d);
    let g = tensor::relu_backward(&r, &x).unwrap();
    relative_error(g.data(), &fd(&x, r.data(), relu64))
}

fn maxpool(s: &mut R, d: &mut R) -> f64 {
    let shape = [s.random_range(1..=2), s.random_range(1..=3), 2 * s.random_range(1..=3), 2 * s.random_range(1..=3)];
    // Distinct values spaced well beyond the step, so every window has a clear maximum.
    let len: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(d);
    let x = Tensor::new(shape.to_vec(), order.iter().map(|&i| i as f32 * 0.01 - 0.5).collect()).unwrap();
    let y = tensor::maxpool2(&x).unwrap();
    let r = random_tensor(y.shape(), d);
    let g = tensor::maxpool2_backward(&r, &x).unwrap();
    relative_error(g.data(), &fd(&x, r.data(), |v| maxpool64(v, shape[2], shape[3])))
}

fn adaptive(s: &mut R, d: &mut R) -> f64 {
    let h = s.random_range(1..=7);
    let w = s.random_range(1..=7);
    let k = s.random_range(1..=h.min(w));
    let shape = [s.random_range(1..=2), s.random_range(1..=3), h, w];
    let x = random_tensor(&shape, d);
    let y = tensor::adaptive_avg_pool(&x, k).unwrap();
    let r = random_tensor(y.shape(), d);
    let g = tensor::adaptive_avg_pool_backward(&r, x.shape()).unwrap();
    relative_error(g.data(), &fd(&x, r.data(), |v| adaptive_avg_pool64(v, h, w, k)))
}

fn softmax(s: &mut R, d: &mut R) -> f64 {
    let shape = [s.random_range(1..=4), s.random_range(2..=7)];
    let x = Tensor::from_fn(&shape, |_| d.random_range(-2.0f32..2.0));
    let y = tensor::softmax(&x).unwrap();
    let r = random_tensor(&shape, d);
    let g = tensor::softmax_backward(&r, &y).unwrap();
    relative_error(g.data(), &fd(&x, r.data(), |v| softmax64(v, shape[1])))
}

fn cross_entropy(s: &mut R, d: &mut R) -> f64 {
    let n = s.random_range(1..=4);
    let c = s.random_range(2..=7);
    let x = Tensor::from_fn(&[n, c], |_| d.random_range(-2.0f32..2.0));
    let targets: Vec<usize> = (0..n).map(|_| d.random_range(0..c)).collect();
    let (_, g) = tensor::cross_entropy_batch(&x, &targets).unwrap();
    let e_batch = relative_error(g.data(), &numeric_gradient64(&widen(x.data()), f64::from(STEP), |v| cross_entropy64(v, c, &targets)));
    let row = Tensor::from_vec(x.outer(0).to_vec());
    let gs = tensor::cross_entropy_backward(&row, targets[0]).unwrap();
    let e_single = relative_error(gs.data(), &numeric_gradient64(&widen(row.data()), f64::from(STEP), |v| cross_entropy64(v, c, &targets[..1])));
    e_batch.max(e_single)
}
