//! Finite-difference utilities for verifying analytic gradients.
//!
//! Everything runs in `f64` with central differences; the step `h = 1e-5`
//! balances truncation against rounding and leaves several orders of
//! magnitude of headroom under the tolerances the tests use.

use ndarray::ArrayD;

/// Central finite-difference gradient of `f` at `x`, perturbing one
/// element at a time.
pub fn finite_difference<F>(mut f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let original = probe.as_slice_mut().expect("standard layout")[idx];
        probe.as_slice_mut().expect("standard layout")[idx] = original + h;
        let plus = f(&probe);
        probe.as_slice_mut().expect("standard layout")[idx] = original - h;
        let minus = f(&probe);
        probe.as_slice_mut().expect("standard layout")[idx] = original;
        grad.as_slice_mut().expect("standard layout")[idx] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Central finite difference of `f` along one scalar direction:
/// `(f(h) - f(-h)) / 2h`. The caller embeds the direction.
pub fn directional_difference<F>(mut f: F, h: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    (f(h) - f(-h)) / (2.0 * h)
}

/// Worst-case elementwise relative error between two gradients.
///
/// The denominator is floored to keep near-zero entries from exploding
/// the ratio: agreement at magnitudes below the floor counts as exact.
pub fn max_relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Relative error between two scalars with the same floor rule.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
