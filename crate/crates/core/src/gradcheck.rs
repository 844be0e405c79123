use crate::tensor::{Real, Tensor};

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn finite_difference_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, eps: f64) -> Tensor<T> {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = T::of(orig.f64() + eps);
        let up = f(&probe);
        probe.data_mut()[i] = T::of(orig.f64() - eps);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = T::of((up - down) / (2.0 * eps));
    }
    grad
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>().sqrt();
    let scale = a.frobenius().max(b.frobenius());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
