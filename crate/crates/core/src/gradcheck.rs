//! Central finite differences, the oracle every analytic backward pass is
//! checked against.

use thiserror::Error;

use crate::tensor::Tensor;

/// Default step for central differences at `f64`.
pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("objective is not finite at element {index} (value {value})")]
    NonFinite { index: usize, value: f64 },
}

/// `(f(x + ε·eᵢ) − f(x − ε·eᵢ)) / 2ε` for every element `i` of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor, GradCheckError>
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(GradCheckError::NonFinite { index: i, value });
            }
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest element-wise relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
