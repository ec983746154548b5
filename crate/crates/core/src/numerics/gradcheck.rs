//! Central finite differences, used to validate analytic gradients.
//!
//! Only forward evaluations are used here, so the check stays independent
//! of the tape's backward code.

use super::tensor::Tensor;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numerical_gradient(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}

/// Largest elementwise relative error `|a−n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps entries whose true gradient is ~0 from dominating through
/// round-off.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
