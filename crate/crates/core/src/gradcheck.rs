//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates the forward value of the loss, so it
//! shares nothing with the backward pass it checks.

use crate::tensor::{Result, Tape, Tensor, Var};

/// Denominator floor for the relative error, so gradients that are zero on
/// both sides do not divide by zero.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of `loss_fn` against central differences with
/// step `h` for every element of every named parameter.
///
/// `loss_fn` receives a fresh tape and one leaf per parameter (in order) and
/// must return a scalar loss.
pub fn check_gradients<L>(params: &[(String, Tensor<f64>)], h: f64, loss_fn: L) -> Result<GradCheckReport>
where
    L: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let leaves: Vec<_> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&tape, &leaves)?;
        let named: Vec<(&str, Var<'_, f64>)> = params
            .iter()
            .zip(&leaves)
            .map(|((n, _), v)| (n.as_str(), *v))
            .collect();
        tape.grad(loss, &named)?
    };

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        loss_fn(&tape, &leaves)?.value().item()
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (p, (name, original)) in params.iter().enumerate() {
        let base = original.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            values[p] = Tensor::new(original.shape().to_vec(), plus)?;
            let f_plus = eval(&values)?;
            let mut minus = base.clone();
            minus[i] -= h;
            values[p] = Tensor::new(original.shape().to_vec(), minus)?;
            let f_minus = eval(&values)?;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
        values[p] = original.clone();
    }
    Ok(report)
}
