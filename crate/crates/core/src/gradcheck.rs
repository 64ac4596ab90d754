//! Central finite differences, used to check the analytic backward rules.

use crate::tensor::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Numeric gradient of a scalar function at `x` with step [`DEFAULT_EPSILON`].
pub fn numeric_gradient(x: &Matrix, f: impl FnMut(&Matrix) -> f64) -> Matrix {
    numeric_gradient_with(x, DEFAULT_EPSILON, f)
}

pub fn numeric_gradient_with(x: &Matrix, eps: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`]; shapes must agree.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}
