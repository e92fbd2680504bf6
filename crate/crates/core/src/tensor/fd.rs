use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient estimate of a scalar-valued function:
/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` per coordinate.
///
/// This is the independent oracle used to audit every analytic backward
/// rule; it only ever calls `f`, never the tape's reverse pass.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "finite_diff_grad requires a positive eps, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let slope = (plus - minus) / (2.0 * eps);
        if !slope.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad.data_mut()[i] = slope;
    }
    Ok(grad)
}

/// Relative disagreement between analytic and numerical gradients:
/// the largest `|a − n| / max(|a|, |n|, floor)` over all coordinates.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Dimension {
            op: "max_relative_error",
            lhs: analytic.shape().to_vec(),
            rhs: numeric.shape().to_vec(),
        });
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max))
}
