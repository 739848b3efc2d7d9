//! Central-finite-difference checking utilities.
//!
//! These helpers never touch kernel internals: they perturb tensor entries
//! one at a time and evaluate a caller-supplied scalar function, so they stay
//! independent of whatever implementation they are checking. Loss values are
//! carried in f64 to keep the difference quotient clean at step 1e-3.

use crate::tensor::Tensor;

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn fd_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f32) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let hi = f(&probe);
        probe.data_mut()[i] = original - step;
        let lo = f(&probe);
        probe.data_mut()[i] = original;
        grad[i] = (hi - lo) / (2.0 * f64::from(step));
    }
    grad
}

/// `sum(grad_probe * value)` in f64; the standard scalar used to reduce a
/// tensor-valued operation to something finite differences can check.
pub fn scalar_probe(value: &Tensor, grad_probe: &Tensor) -> f64 {
    value
        .data()
        .iter()
        .zip(grad_probe.data())
        .map(|(&v, &g)| f64::from(v) * f64::from(g))
        .sum()
}

/// Worst-case relative error between an analytic gradient and a finite
/// difference estimate. The denominator is floored at 1 so near-zero entries
/// are compared absolutely instead of blowing up the ratio.
pub fn max_relative_error(analytic: &[f32], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| {
            let a = f64::from(a);
            let denom = a.abs().max(f.abs()).max(1.0);
            (a - f).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_recovers_quadratic_gradient() {
        // f(x) = sum(x^2) has gradient 2x.
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -0.25, 0.75]).unwrap();
        let fd = fd_gradient(
            |t| t.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum(),
            &x,
            1e-3,
        );
        let analytic: Vec<f32> = x.data().iter().map(|&v| 2.0 * v).collect();
        assert!(max_relative_error(&analytic, &fd) < 1e-4);
    }
}
