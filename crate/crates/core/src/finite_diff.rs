//! Central-difference gradient oracle.
//!
//! Deliberately knows nothing about [`crate::tensor::Graph`]: it only ever
//! evaluates the supplied closure, so tests can use it as an independent
//! check on analytic gradients.

use crate::scalar::Scalar;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum FiniteDiffError {
    #[error("step size must be positive")]
    InvalidStep,
    #[error("function returned a non-finite value while perturbing coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}

/// Gradient of `f` at `point` via `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_grad<T, F>(
    mut f: F,
    point: &[T],
    h: T,
) -> Result<Vec<T>, FiniteDiffError>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if h <= T::zero() {
        return Err(FiniteDiffError::InvalidStep);
    }
    let two_h = h + h;
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(FiniteDiffError::NonFinite { coordinate: i });
        }
        grad.push((up - down) / two_h);
    }
    Ok(grad)
}

/// Largest relative error between an analytic gradient and the oracle,
/// with denominators floored to dodge division by almost-zero entries.
pub fn max_relative_error<T: Scalar>(analytic: &[T], oracle: &[T], floor: T) -> T {
    assert_eq!(analytic.len(), oracle.len());
    let mut worst = T::zero();
    for (&a, &o) in analytic.iter().zip(oracle) {
        let denom = a.abs().max(o.abs()).max(floor);
        let rel = (a - o).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
