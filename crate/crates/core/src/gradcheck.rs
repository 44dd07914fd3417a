//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` at `point` with central
/// differences `(f(x+εe) − f(x−εe)) / 2ε` on every coordinate. Returns the
/// largest relative error.
///
/// `f` maps a point to `(value, analytic gradient)`; only the value is used
/// at perturbed points.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    finite_diff_check_coords(f, point, eps, &coords)
}

/// Same as [`finite_diff_check`] restricted to a subset of coordinates.
pub fn finite_diff_check_coords<F>(f: F, point: &Tensor<f64>, eps: f64, coords: &[usize]) -> f64
where
    F: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    assert!(eps > 0.0, "eps must be positive");
    let (_, analytic) = f(point);
    assert_eq!(analytic.shape(), point.shape(), "gradient shape mismatch");
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let (fp, _) = f(&probe);
        probe.data_mut()[i] = x0 - eps;
        let (fm, _) = f(&probe);
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t| {
                let v: f64 = t.data().iter().map(|a| a * a).sum();
                (v, t.scale(2.0))
            },
            &x,
            1e-4,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 4.0]).unwrap();
        let err = finite_diff_check(|t| (7.0, Tensor::zeros(t.shape())), &x, 1e-4);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let err = finite_diff_check(|t| (t.data()[0].powi(3), t.scale(2.0)), &x, 1e-4);
        assert!(err > 0.3);
    }
}
