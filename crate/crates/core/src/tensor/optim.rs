use super::{GradPair, Tensor};

/// In-place `p <- p - lr * (grad + weight_decay * p)`.
pub fn sgd_update(value: &mut Tensor, grad: &Tensor, learning_rate: f32, weight_decay: f32) {
    assert_eq!(value.shape(), grad.shape(), "sgd_update on mismatched shapes");
    for (p, g) in value.data_mut().iter_mut().zip(grad.data()) {
        *p -= learning_rate * (g + weight_decay * *p);
    }
}

/// Plain SGD with L2 weight decay applied to every parameter in `params`.
pub fn sgd_step(params: &mut [GradPair], learning_rate: f32, weight_decay: f32) {
    for p in params {
        sgd_update(&mut p.value, &p.grad, learning_rate, weight_decay);
    }
}
