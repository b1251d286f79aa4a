use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{image_dims, image_shape, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one spatial axis.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(op: &'static str, input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (n, c_in, h, w) = image_dims(op, input)?;
        let [c_out, wc_in, kh, kw] = *weights.shape() else {
            return Err(Error::shape(
                op,
                format!("weights must be [C_out,C_in,kh,kw], got {:?}", weights.shape()),
            ));
        };
        if wc_in != c_in {
            return Err(Error::shape(
                op,
                format!("input {:?} has {c_in} channels but weights {:?} expect {wc_in}", input.shape(), weights.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid(format!("{op}: stride must be at least 1")));
        }
        let (Some(oh), Some(ow)) = (
            conv2d_output_size(h, kh, stride, padding),
            conv2d_output_size(w, kw, stride, padding),
        ) else {
            return Err(Error::shape(
                op,
                format!("kernel {:?} does not fit input {:?} with padding {padding}", weights.shape(), input.shape()),
            ));
        };
        Ok(Geometry { n, c_in, h, w, c_out, kh, kw, stride, padding, oh, ow })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one `[C_in, H, W]` sample into `cols[K, P]`.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (p, ow) = (self.p(), self.ow);
        let pad = self.padding as isize;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - pad;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - pad;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Fold `cols[K, P]` back onto a `[C_in, H, W]` gradient, summing overlaps.
    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (p, ow) = (self.p(), self.ow);
        let pad = self.padding as isize;
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + j) as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input` (`[C_in,H,W]` or `[N,C_in,H,W]`) with
/// `weights` `[C_out,C_in,kh,kw]`, plus a per-output-channel `bias`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Geometry::new("conv2d", input, weights, stride, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} does not match weights {:?}", bias.shape(), weights.shape()),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let mut out = vec![0f32; g.n * out_stride];
    let mut cols = vec![0f32; k * p];
    for s in 0..g.n {
        g.im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        let y = &mut out[s * out_stride..(s + 1) * out_stride];
        gemm_nn(g.c_out, k, p, weights.data(), &cols, y);
        for (c, &b) in bias.data().iter().enumerate() {
            for v in &mut y[c * p..(c + 1) * p] {
                *v += b;
            }
        }
    }
    Tensor::new(image_shape(input, g.n, g.c_out, g.oh, g.ow), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of a scalar loss with respect to the input, weights and bias of a
/// [`conv2d`] call, given the loss gradient `upstream` at its output. Weight and
/// bias gradients are summed over the batch in sample order.
pub fn conv2d_backward(
    upstream: &Tensor,
    saved_input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads> {
    let g = Geometry::new("conv2d_backward", saved_input, weights, stride, padding)?;
    let expected = image_shape(saved_input, g.n, g.c_out, g.oh, g.ow);
    if upstream.shape() != expected.as_slice() {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?} but forward output would be {expected:?}", upstream.shape()),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let mut dx = vec![0f32; g.n * in_stride];
    let mut dw = vec![0f32; g.c_out * k];
    let mut db = vec![0f32; g.c_out];
    let mut cols = vec![0f32; k * p];
    let mut dcols = vec![0f32; k * p];
    for s in 0..g.n {
        let dy = &upstream.data()[s * out_stride..(s + 1) * out_stride];
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += dy[c * p..(c + 1) * p].iter().sum::<f32>();
        }
        g.im2col(&saved_input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        gemm_nt(g.c_out, p, k, dy, &cols, &mut dw);
        dcols.fill(0.0);
        gemm_tn(k, g.c_out, p, weights.data(), dy, &mut dcols);
        g.col2im(&dcols, &mut dx[s * in_stride..(s + 1) * in_stride]);
    }
    Ok(Conv2dGrads {
        input: Tensor::new(saved_input.shape().to_vec(), dx)?,
        weight: Tensor::new(weights.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.c_out], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_kernel(c: usize) -> Tensor {
        let mut w = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        w
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32 * 0.37).sin());
        let y = conv2d(&x, &identity_kernel(3), &Tensor::zeros(&[3]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::zeros(&[2, 6, 6]);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f32);
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        for c in 0..3 {
            assert!(y.data()[c * 9..(c + 1) * 9].iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn output_size_follows_floor_rule() {
        let x = Tensor::zeros(&[1, 7, 8]);
        let w = Tensor::zeros(&[1, 1, 3, 2]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5]);
    }

    #[test]
    fn mismatched_channels_name_both_shapes() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[4]), 1, 0).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 5, 5]") && err.contains("[4, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn oversized_kernel_and_zero_stride_rejected() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 1, 1]), &Tensor::zeros(&[1]), 0, 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| i as f32 * 0.01);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f32).cos());
        let up = Tensor::zeros(&[2, 3, 5, 5]);
        let g = conv2d_backward(&up, &x, &w, 1, 1).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let x = Tensor::from_fn(&[3, 4, 4], |i| i as f32);
        let up = Tensor::from_fn(&[3, 4, 4], |i| (i as f32 * 0.3).sin());
        let g = conv2d_backward(&up, &x, &identity_kernel(3), 1, 0).unwrap();
        assert_eq!(g.input, up);
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert!(conv2d_backward(&Tensor::zeros(&[2, 4, 4]), &x, &w, 1, 0).is_err());
    }
}
