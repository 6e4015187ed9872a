//! Central-difference gradient verification.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over every entry
/// of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_with(f, params, eps, |_| {})
}

/// Like [`grad_check`], with a hook to configure the analytic tape.
pub fn grad_check_with<F, S>(f: F, params: &[Tensor], eps: f64, setup: S) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    S: Fn(&Tape),
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::Precondition(format!(
            "grad_check: eps must be positive and finite, got {eps}"
        )));
    }

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        setup(&tape);
        let vars = params
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&tape, &vars)?;
        loss.backward()?;
        vars.iter()
            .map(|v| v.grad().expect("backward fills every parameter"))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars = perturbed
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        let v = out.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "grad_check" })
        }
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let original = params[p].data()[i];
            work[p].data_mut()[i] = original + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = original - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[p].data()[i];
            let err = (exact - numeric).abs() / 1f64.max(exact.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
