//! Numerical gradient checking via central differences. Used by tests to
//! verify every backward implementation against the definition.

use super::ops::no_grad;
use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of a scalar-valued function w.r.t. each input,
/// evaluated at the inputs' current values. The inputs are perturbed in place
/// and restored afterwards.
pub fn finite_diff_gradients(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for input in inputs {
        let orig = input.to_vec();
        let mut g = vec![0.0; orig.len()];
        for j in 0..orig.len() {
            let mut bumped = orig.clone();
            bumped[j] = orig[j] + eps;
            input.set_data(&bumped);
            let hi = no_grad(|| f(inputs))?.item();
            bumped[j] = orig[j] - eps;
            input.set_data(&bumped);
            let lo = no_grad(|| f(inputs))?.item();
            g[j] = (hi - lo) / (2.0 * eps);
        }
        input.set_data(&orig);
        grads.push(g);
    }
    Ok(grads)
}

/// Worst-case elementwise discrepancy |a - n| / max(1, |a|, |n|).
pub fn max_grad_discrepancy(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}
