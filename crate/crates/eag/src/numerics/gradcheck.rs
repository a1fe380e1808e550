//! Finite-difference validation of analytic gradients.

use crate::error::{EagError, Result};

/// Compare an analytic gradient against central differences of `loss`.
///
/// Returns the max over parameters of
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
/// A non-finite loss at any probe point is an error naming the parameter.
pub fn grad_check(
    loss: &mut dyn FnMut(&[f64]) -> f64,
    analytic: &[f64],
    params: &[f64],
    eps: f64,
) -> Result<f64> {
    assert!(eps > 0.0, "grad_check eps must be positive");
    assert_eq!(analytic.len(), params.len(), "gradient/parameter length mismatch");
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = loss(&probe);
        probe[i] = orig - eps;
        let down = loss(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(EagError::numeric(format!(
                "non-finite loss while probing parameter {i} (f+ = {up}, f- = {down})"
            )));
        }
        let central = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(central.abs()).max(1e-12);
        let rel = (analytic[i] - central).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
