//! Central finite-difference verification of analytic gradients.

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step {0} outside [1e-7, 1e-4]")]
    InvalidStep(f64),
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Worst mismatch found for one named parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub relative_error: f64,
}

/// Compares backward against central differences for every trainable entry
/// of `store` and returns the largest relative error.
///
/// The error of one parameter tensor is
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)` with the
/// Euclidean norm over its entries; frozen entries are skipped.
pub fn grad_check<F>(f: F, store: &ParamStore, eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&ParamStore) -> Result<Tensor, TensorError>,
{
    Ok(grad_check_report(f, store, eps)?
        .iter()
        .map(|c| c.relative_error)
        .fold(0.0, f64::max))
}

pub fn grad_check_report<F>(f: F, store: &ParamStore, eps: f64) -> Result<Vec<ParamCheck>, GradCheckError>
where
    F: Fn(&ParamStore) -> Result<Tensor, TensorError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(GradCheckError::InvalidStep(eps));
    }
    let base = store.fresh_copy();
    let loss = f(&base)?;
    let again = f(&base)?.item()?;
    let first = loss.item()?;
    if first.to_bits() != again.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second: again });
    }
    loss.backward()?;

    let mut report = Vec::new();
    for (name, param) in base.trainable() {
        let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.numel()]);
        let values = param.values().to_vec();
        let mut numeric = Vec::with_capacity(values.len());
        for i in 0..values.len() {
            let eval = |delta: f64| -> Result<f64, GradCheckError> {
                let mut shifted = values.clone();
                shifted[i] += delta;
                let mut s = base.clone();
                s.replace_values(name, shifted)?;
                Ok(f(&s)?.item()?)
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-12);
        report.push(ParamCheck {
            name: name.to_string(),
            relative_error: norm(&diff) / denom,
        });
    }
    Ok(report)
}
