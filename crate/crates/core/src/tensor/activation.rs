use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape(), |i| input.data()[i].max(0.0))
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(upstream: &Tensor, saved_input: &Tensor) -> Result<Tensor> {
    if upstream.shape() != saved_input.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("upstream {:?} vs input {:?}", upstream.shape(), saved_input.shape()),
        ));
    }
    let data = upstream
        .data()
        .iter()
        .zip(saved_input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 && t.ndim() <= 2 => Ok(d),
        _ => Err(Error::shape(op, format!("expected [C] or [N,C], got {:?}", t.shape()))),
    }
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Softmax over the last axis of a `[C]` or `[N, C]` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let c = last_dim("softmax", logits)?;
    if !logits.is_finite() {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let mut out = vec![0f32; logits.len()];
    for (row, o) in logits.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        softmax_row(row, o);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax given its forward `output`.
pub fn softmax_backward(upstream: &Tensor, output: &Tensor) -> Result<Tensor> {
    let c = last_dim("softmax_backward", output)?;
    if upstream.shape() != output.shape() {
        return Err(Error::shape(
            "softmax_backward",
            format!("upstream {:?} vs output {:?}", upstream.shape(), output.shape()),
        ));
    }
    let mut dx = vec![0f32; output.len()];
    for ((u, y), d) in upstream
        .data()
        .chunks_exact(c)
        .zip(output.data().chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        let inner: f32 = u.iter().zip(y).map(|(a, b)| a * b).sum();
        for i in 0..c {
            d[i] = y[i] * (u[i] - inner);
        }
    }
    Tensor::new(output.shape().to_vec(), dx)
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln()
}

/// Categorical cross-entropy of one logit vector against `target`.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f32> {
    if logits.ndim() != 1 || logits.is_empty() {
        return Err(Error::shape("cross_entropy", format!("expected [C], got {:?}", logits.shape())));
    }
    if target >= logits.len() {
        return Err(Error::invalid(format!("target {target} out of range for {} classes", logits.len())));
    }
    Ok(log_sum_exp(logits.data()) - logits.data()[target])
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax - onehot`.
pub fn cross_entropy_backward(logits: &Tensor, target: usize) -> Result<Tensor> {
    if target >= logits.len() {
        return Err(Error::invalid(format!("target {target} out of range for {} classes", logits.len())));
    }
    let mut p = softmax(logits)?;
    p.data_mut()[target] -= 1.0;
    Ok(p)
}

/// Mean cross-entropy over a `[N, C]` batch plus its gradient (already divided by `N`).
pub fn cross_entropy_batch(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let [n, c] = *logits.shape() else {
        return Err(Error::shape("cross_entropy_batch", format!("expected [N,C], got {:?}", logits.shape())));
    };
    if n != targets.len() || n == 0 {
        return Err(Error::shape(
            "cross_entropy_batch",
            format!("{n} logit rows vs {} targets", targets.len()),
        ));
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0f64;
    let inv = 1.0 / n as f32;
    for (i, (&t, row)) in targets.iter().zip(logits.data().chunks_exact(c)).enumerate() {
        if t >= c {
            return Err(Error::invalid(format!("target {t} out of range for {c} classes")));
        }
        loss += (log_sum_exp(row) - row[t]) as f64;
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        g[t] -= 1.0;
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok((loss / n as f64, grad))
}
