//! The raw kernels: a convolution, its backward pass checked against a
//! finite difference, pooling, and a softmax cross-entropy.
//!
//! ```text
//! cargo run --example tensor_kernels
//! ```

use semroute::tensor::{self, Tensor};

fn main() -> semroute::Result<()> {
    // One 1x4x4 image and a 2-filter 3x3 kernel.
    let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f32 / 8.0).collect())?;
    let w = Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 2 == 0 { 0.25 } else { -0.1 });
    let b = Tensor::new(vec![2], vec![0.0, 0.5])?;
    let y = tensor::conv2d(&x, &w, &b, 1, 1)?;
    println!("conv2d output {:?}, first row {:?}", y.shape(), &y.data()[..4]);

    // Gradient of sum(y) with respect to one weight, analytic vs central difference.
    let ones = Tensor::full(y.shape(), 1.0);
    let grads = tensor::conv2d_backward(&ones, &x, &w, 1, 1)?;
    let h = 1e-3;
    let mut wp = w.clone();
    wp.data_mut()[4] += h;
    let mut wm = w.clone();
    wm.data_mut()[4] -= h;
    let fd = (tensor::conv2d(&x, &wp, &b, 1, 1)?.sum() - tensor::conv2d(&x, &wm, &b, 1, 1)?.sum()) / (2.0 * h);
    println!("dL/dw[4]: analytic {:.5}, finite difference {:.5}", grads.weight.data()[4], fd);

    let pooled = tensor::maxpool2(&tensor::relu(&y))?;
    let gap = tensor::adaptive_avg_pool(&y, 1)?;
    println!("maxpool2 {:?}, global average {:?}", pooled.shape(), gap.data());

    let logits = Tensor::new(vec![2, 3], vec![2.0, 0.5, -1.0, 0.1, 0.2, 3.0])?;
    let probs = tensor::softmax(&logits)?;
    let (loss, grad) = tensor::cross_entropy_batch(&logits, &[0, 2])?;
    println!("softmax rows {:?}", probs.data());
    println!("mean cross-entropy {loss:.4}, gradient {:?}", grad.data());
    Ok(())
}
