use super::{Result, Tensor, TensorError};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at a point.
/// The result is `max_i |analytic_i − numeric_i| / (|analytic_i| + 1e−12)`.
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let (_, analytic) = f(x)?;
    if analytic.shape() != x.shape() {
        return Err(super::shape_err(
            "finite_difference_check",
            format!("gradient {:?} for point {:?}", analytic.shape(), x.shape()),
        ));
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(TensorError::NonFiniteValue {
                node: i,
                op: "finite_difference",
            });
        }
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
    }
    Ok(worst)
}
