//! Finite-difference gradient checking.
//!
//! The checked function builds a fresh graph from named input tensors and
//! returns the scalar loss plus the reverse-mode gradients of those inputs.
//! Central differences perturb every element of every input.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NamedTensors = BTreeMap<String, Tensor>;

/// Relative error between an analytic and a numerical gradient entry.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients of `f` against central differences and
/// return the worst relative error over all input elements.
///
/// `f` must be deterministic given its inputs (fix any sampling noise inside
/// the closure before calling).
pub fn grad_check<F>(f: F, inputs: &NamedTensors, eps: f64) -> Result<f64>
where
    F: Fn(&NamedTensors) -> Result<(f64, NamedTensors)>,
{
    assert!((1e-7..=1e-3).contains(&eps), "eps out of supported range");
    let (value, analytic) = f(inputs)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check(f)"));
    }
    let mut worst: f64 = 0.0;
    for (name, tensor) in inputs {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("f returned no gradient for '{name}'")))?;
        for i in 0..tensor.len() {
            let mut plus = inputs.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let (fp, _) = f(&plus)?;
            let mut minus = inputs.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let (fm, _) = f(&minus)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("grad_check(perturbed f)"));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
