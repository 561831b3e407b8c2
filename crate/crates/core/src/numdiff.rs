//! Central finite differences, used as a gradient oracle.

use crate::tensor::Tensor;

/// Entrywise central difference `(f(t + h·e) − f(t − h·e)) / 2h`.
///
/// # Panics
///
/// Panics unless `h > 0`.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, t: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive, got {h}");
    let mut probe = t.clone();
    let mut grad = Tensor::zeros(t.shape()).expect("shape already valid");
    for i in 0..t.len() {
        let x = t.data()[i];
        probe.data_mut()[i] = x + h;
        let up = f(&probe);
        probe.data_mut()[i] = x - h;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}
