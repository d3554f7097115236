//! Finite-difference oracle for gradient checks.

use crate::tensor::Tensor;

/// Central differences `(f(x+h·eᵢ) − f(x−h·eᵢ))/(2h)` for every element.
pub fn fd_gradient(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        grad.data_mut()[i] = fd_partial(&mut f, &mut probe, i, h);
    }
    grad
}

/// Central difference along a single coordinate. `probe` is restored.
pub fn fd_partial(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    probe: &mut Tensor<f64>,
    index: usize,
    h: f64,
) -> f64 {
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + h;
    let up = f(probe);
    probe.data_mut()[index] = orig - h;
    let down = f(probe);
    probe.data_mut()[index] = orig;
    (up - down) / (2.0 * h)
}

/// `max|a − b| / max(max|a|, max|b|)`, the worst deviation relative to the
/// gradient's scale. Zero when both are identically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
